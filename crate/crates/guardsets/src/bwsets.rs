//! Bandwidth-quantum guard sets: the baseline design the cone hierarchy is
//! compared against.
//!
//! Guards are cut into equal quanta, quanta are packed into sets by
//! descending bandwidth, and damaged sets are repaired from a leftover pool
//! through a candidate window keyed to the set's largest quantum. A guard
//! that has entered a set keeps its quantum count from that day on; guards
//! still wholly in the leftover pool are re-quantized as their bandwidth
//! moves.

use std::collections::{BTreeMap, HashSet};

use thiserror::Error;

use crate::hierarchy::Thresholds;
use crate::ids;
use crate::ingest::Fingerprint;

#[derive(Debug, Error)]
pub enum BwError {
    #[error("set {0} has no quanta")]
    EmptySet(u64),
    #[error("unknown set {0}")]
    UnknownSet(u64),
}

/// One share of a guard's bandwidth.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantum {
    pub guard: Fingerprint,
    pub bandwidth: f64,
}

/// Split each guard into equal quanta: `floor(bw / threshold)` shares once
/// the bandwidth reaches twice the threshold, one share otherwise.
pub fn quantum_count(bandwidth: f64, threshold: f64) -> u32 {
    if bandwidth >= 2.0 * threshold {
        (bandwidth / threshold).floor() as u32
    } else {
        1
    }
}

pub fn quantize(guards: &[(Fingerprint, f64)], threshold: f64) -> Vec<Quantum> {
    let mut out = Vec::new();
    for (guard, bw) in guards {
        let count = quantum_count(*bw, threshold);
        let each = *bw / f64::from(count);
        for _ in 0..count {
            out.push(Quantum {
                guard: guard.clone(),
                bandwidth: each,
            });
        }
    }
    out
}

fn sort_descending(quanta: &mut [Quantum]) {
    quanta.sort_by(|a, b| {
        b.bandwidth
            .total_cmp(&a.bandwidth)
            .then_with(|| a.guard.cmp(&b.guard))
    });
}

/// A guard set holding quanta. `members` maps each guard to how many of its
/// quanta sit in this set.
#[derive(Clone, Debug)]
pub struct BwSet {
    pub id: u64,
    members: Vec<(Fingerprint, u32)>,
    /// Largest quantum bandwidth the set has ever held; anchors the repair
    /// window even after the member that set it shrinks or leaves.
    window_max: f64,
}

impl BwSet {
    pub fn members(&self) -> &[(Fingerprint, u32)] {
        &self.members
    }

    pub fn guards(&self) -> impl Iterator<Item = &Fingerprint> {
        self.members.iter().map(|(g, _)| g)
    }

    fn add_quantum(&mut self, guard: &Fingerprint) {
        match self.members.iter_mut().find(|(g, _)| g == guard) {
            Some((_, n)) => *n += 1,
            None => self.members.push((guard.clone(), 1)),
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct GuardQuanta {
    bandwidth: f64,
    count: u32,
    /// Set once any quantum of this guard has entered a set; from then on
    /// the count never changes, only the per-quantum value does.
    frozen: bool,
}

#[derive(Clone, Debug, Default)]
pub struct BwChangeLog {
    pub created: Vec<u64>,
    pub dismantled: Vec<u64>,
    pub repaired_sets: Vec<u64>,
    /// One per quantum moved during repair.
    pub repairs: u32,
}

/// Full state of the quantum design across days.
#[derive(Clone, Debug, Default)]
pub struct BwState {
    sets: Vec<BwSet>,
    /// Leftover pool: per guard, how many of its quanta are unplaced.
    leftover: BTreeMap<Fingerprint, u32>,
    guards: BTreeMap<Fingerprint, GuardQuanta>,
}

impl BwState {
    pub fn sets(&self) -> &[BwSet] {
        &self.sets
    }

    pub fn set(&self, id: u64) -> Result<&BwSet, BwError> {
        self.sets
            .iter()
            .find(|s| s.id == id)
            .ok_or(BwError::UnknownSet(id))
    }

    pub fn quantum_value(&self, guard: &Fingerprint) -> f64 {
        let q = &self.guards[guard];
        q.bandwidth / f64::from(q.count.max(1))
    }

    pub fn set_bandwidth(&self, set: &BwSet) -> f64 {
        set.members
            .iter()
            .map(|(g, n)| self.quantum_value(g) * f64::from(*n))
            .sum()
    }

    pub fn leftover_quanta(&self) -> Vec<Quantum> {
        let mut out = Vec::new();
        for (guard, n) in &self.leftover {
            let each = self.quantum_value(guard);
            for _ in 0..*n {
                out.push(Quantum {
                    guard: guard.clone(),
                    bandwidth: each,
                });
            }
        }
        out
    }

    pub fn leftover_total(&self) -> f64 {
        self.leftover
            .iter()
            .map(|(g, n)| self.quantum_value(g) * f64::from(*n))
            .sum()
    }

    /// Total quanta the guard is split into today, 0 if unknown.
    pub fn guard_quantum_count(&self, guard: &Fingerprint) -> u32 {
        self.guards.get(guard).map(|q| q.count).unwrap_or(0)
    }

    pub fn is_placed(&self, guard: &Fingerprint) -> bool {
        self.sets
            .iter()
            .any(|s| s.members.iter().any(|(g, _)| g == guard))
    }

    /// The set currently holding any quantum of `guard`, if one does.
    pub fn sets_of(&self, guard: &Fingerprint) -> Vec<u64> {
        self.sets
            .iter()
            .filter(|s| s.members.iter().any(|(g, _)| g == guard))
            .map(|s| s.id)
            .collect()
    }

    fn fresh_id(&self, members: &[(Fingerprint, u32)]) -> u64 {
        let live: HashSet<u64> = self.sets.iter().map(|s| s.id).collect();
        let mut payload: Vec<Vec<u8>> = members
            .iter()
            .map(|(g, n)| format!("{g}:{n}").into_bytes())
            .collect();
        for salt in 0u32.. {
            if salt > 0 {
                payload.push(salt.to_le_bytes().to_vec());
            }
            let parts: Vec<&[u8]> = payload.iter().map(Vec::as_slice).collect();
            let id = ids::id16("bwset", &parts);
            if !live.contains(&id) {
                return id;
            }
        }
        unreachable!()
    }

    /// Apply one day of guard arrivals, departures, and bandwidth changes,
    /// then run the repair and formation pass.
    pub fn update_day(
        &mut self,
        guards_today: &[(Fingerprint, f64)],
        thresholds: Thresholds,
    ) -> BwChangeLog {
        let mut log = BwChangeLog::default();
        let today: BTreeMap<&Fingerprint, f64> =
            guards_today.iter().map(|(g, b)| (g, *b)).collect();

        // Departures lose their quanta everywhere.
        let departed: Vec<Fingerprint> = self
            .guards
            .keys()
            .filter(|g| !today.contains_key(*g))
            .cloned()
            .collect();
        for g in &departed {
            self.guards.remove(g);
            self.leftover.remove(g);
            for set in &mut self.sets {
                set.members.retain(|(m, _)| m != g);
            }
        }

        // Bandwidth updates and arrivals. Guards never placed in a set are
        // re-quantized; guards in sets keep their count.
        for (guard, bw) in guards_today {
            match self.guards.get_mut(guard) {
                Some(q) => {
                    q.bandwidth = *bw;
                    if !q.frozen {
                        let count = quantum_count(*bw, thresholds.tau_up);
                        if count != q.count {
                            q.count = count;
                            self.leftover.insert(guard.clone(), count);
                        }
                    }
                }
                None => {
                    let count = quantum_count(*bw, thresholds.tau_up);
                    self.guards.insert(
                        guard.clone(),
                        GuardQuanta {
                            bandwidth: *bw,
                            count,
                            frozen: false,
                        },
                    );
                    self.leftover.insert(guard.clone(), count);
                }
            }
        }

        // Sets with every guard gone dismantle; anything else survives.
        self.sets.retain(|s| {
            if s.members.is_empty() {
                log.dismantled.push(s.id);
                false
            } else {
                true
            }
        });

        // A member quantum growing past the anchor raises it; it never falls.
        let peaks: Vec<f64> = self
            .sets
            .iter()
            .map(|s| {
                s.members
                    .iter()
                    .map(|(g, _)| self.quantum_value(g))
                    .fold(f64::MIN, f64::max)
            })
            .collect();
        for (set, peak) in self.sets.iter_mut().zip(peaks) {
            if peak > set.window_max {
                set.window_max = peak;
            }
        }

        // Repair damaged sets, most damaged first.
        let mut order: Vec<(f64, u64)> = self
            .sets
            .iter()
            .map(|s| (self.set_bandwidth(s), s.id))
            .filter(|(bw, _)| *bw < thresholds.tau_down)
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        for (_, id) in order {
            let repairs = self.repair_set(id, thresholds);
            if repairs > 0 {
                log.repairs += repairs;
                log.repaired_sets.push(id);
            }
        }

        // Enough leftover forms new sets.
        let mut pool = self.leftover_quanta();
        sort_descending(&mut pool);
        let mut cursor = 0usize;
        loop {
            let mut cum = 0.0;
            let mut end = cursor;
            while end < pool.len() && cum < thresholds.tau_up {
                cum += pool[end].bandwidth;
                end += 1;
            }
            if cum < thresholds.tau_up {
                break;
            }
            let mut members: Vec<(Fingerprint, u32)> = Vec::new();
            for q in &pool[cursor..end] {
                match members.iter_mut().find(|(g, _)| g == &q.guard) {
                    Some((_, n)) => *n += 1,
                    None => members.push((q.guard.clone(), 1)),
                }
            }
            let id = self.fresh_id(&members);
            for (g, n) in &members {
                self.take_from_leftover(g, *n);
                self.guards.get_mut(g).unwrap().frozen = true;
            }
            self.sets.push(BwSet {
                id,
                members,
                window_max: pool[cursor].bandwidth,
            });
            log.created.push(id);
            cursor = end;
        }

        log
    }

    /// First-day formation: quantize everything and pack descending.
    pub fn form(guards_today: &[(Fingerprint, f64)], thresholds: Thresholds) -> (BwState, BwChangeLog) {
        let mut state = BwState::default();
        let log = state.update_day(guards_today, thresholds);
        (state, log)
    }

    fn take_from_leftover(&mut self, guard: &Fingerprint, n: u32) {
        if let Some(have) = self.leftover.get_mut(guard) {
            *have = have.saturating_sub(n);
            if *have == 0 {
                self.leftover.remove(guard);
            }
        }
    }

    /// Candidate quanta for repairing `set`: leftover quanta no bigger than
    /// the set's anchor quantum and no smaller than half of it, descending.
    /// The anchor is the largest quantum the set ever held, so a set whose
    /// members have all decayed still recruits at its original scale.
    pub fn candidate_list(&self, set_id: u64) -> Result<Vec<Quantum>, BwError> {
        let set = self.set(set_id)?;
        if set.members.is_empty() {
            return Err(BwError::EmptySet(set_id));
        }
        let max_quantum = set.window_max;
        let mut out: Vec<Quantum> = self
            .leftover_quanta()
            .into_iter()
            .filter(|q| q.bandwidth >= 0.5 * max_quantum && q.bandwidth <= max_quantum)
            .collect();
        sort_descending(&mut out);
        Ok(out)
    }

    /// Repair-window anchor of a set, for observers tuning offers into it.
    pub fn window_max(&self, set_id: u64) -> Result<f64, BwError> {
        Ok(self.set(set_id)?.window_max)
    }

    fn repair_set(&mut self, set_id: u64, thresholds: Thresholds) -> u32 {
        let mut repairs = 0;
        loop {
            let set = self.set(set_id).unwrap();
            if self.set_bandwidth(set) >= thresholds.tau_up {
                break;
            }
            let Ok(candidates) = self.candidate_list(set_id) else {
                break;
            };
            let Some(best) = candidates.first().cloned() else {
                break;
            };
            self.take_from_leftover(&best.guard, 1);
            self.guards.get_mut(&best.guard).unwrap().frozen = true;
            let set = self.sets.iter_mut().find(|s| s.id == set_id).unwrap();
            set.add_quantum(&best.guard);
            repairs += 1;
        }
        repairs
    }

    /// Sum of quantum bandwidth everywhere: sets plus leftover. Always equal
    /// to the total bandwidth of known guards.
    pub fn total_quantum_bandwidth(&self) -> f64 {
        let in_sets: f64 = self.sets.iter().map(|s| self.set_bandwidth(s)).sum();
        in_sets + self.leftover_total()
    }
}
