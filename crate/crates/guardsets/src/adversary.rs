//! Attacker strategies: bandwidth-tuned infiltration of quantum sets,
//! day-one injection attacks, and the targeted per-client attack. All
//! decisions made on day d take effect in day d+1's consensus.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::asgraph::Asn;
use crate::assignment::ClientState;
use crate::bwsets::{quantum_count, BwSet, BwState};
use crate::exec;
use crate::hierarchy::{Hierarchy, Thresholds};
use crate::ingest::{Fingerprint, NetworkSnapshot, PrefixMap};

/// Relays below this offer lose the guard flag.
pub const BANDWIDTH_FLOOR: f64 = 2.0;

/// Reserved AS for tuner-strategy relays whose network position is
/// irrelevant (quantum sets ignore AS entirely).
const TUNER_ASN: u32 = 64512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    BwTuningHigh,
    BwTuningLow,
    LowResource,
    Centralized,
    Botnet,
    Targeted,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Strategy::BwTuningHigh => "bw-tuning-high",
            Strategy::BwTuningLow => "bw-tuning-low",
            Strategy::LowResource => "low-resource",
            Strategy::Centralized => "centralized",
            Strategy::Botnet => "botnet",
            Strategy::Targeted => "targeted",
        };
        write!(f, "{s}")
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bw-tuning-high" => Ok(Strategy::BwTuningHigh),
            "bw-tuning-low" => Ok(Strategy::BwTuningLow),
            "low-resource" => Ok(Strategy::LowResource),
            "centralized" => Ok(Strategy::Centralized),
            "botnet" => Ok(Strategy::Botnet),
            "targeted" => Ok(Strategy::Targeted),
            other => Err(format!("unknown strategy {other:?}")),
        }
    }
}

/// Whether the attacker sees tomorrow's honest bandwidths exactly or only
/// extrapolates from today's.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Foresight {
    #[default]
    Perfect,
    Threshold,
}

impl FromStr for Foresight {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "perfect" => Ok(Foresight::Perfect),
            "threshold" => Ok(Foresight::Threshold),
            other => Err(format!("unknown foresight mode {other:?}")),
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct AdversaryConfig {
    pub strategy: Strategy,
    /// Budget as a fraction of the day's total honest guard bandwidth.
    pub bandwidth_fraction: f64,
    pub epsilon_mbps: f64,
    /// Ownership share above which the low-bandwidth tuner abandons a set.
    pub main_provider_fraction: f64,
    pub foresight: Foresight,
    /// Daily downward step while a joined set stays comfortably alive.
    pub decay_step_mbps: f64,
    /// Days before a set abandoned by the low tuner may be re-entered.
    pub reentry_cooldown_days: u32,
}

impl AdversaryConfig {
    pub fn new(strategy: Strategy) -> Self {
        AdversaryConfig {
            strategy,
            bandwidth_fraction: 0.05,
            epsilon_mbps: 0.1,
            main_provider_fraction: 0.9,
            foresight: Foresight::Perfect,
            decay_step_mbps: 1.0,
            reentry_cooldown_days: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MaliciousGuard {
    pub fingerprint: Fingerprint,
    pub asn: Asn,
    pub address: Ipv4Addr,
    pub offered_bandwidth: f64,
    pub active: bool,
}

fn mint_guard(counter: &mut u32, asn: Asn, offered: f64) -> MaliciousGuard {
    let n = *counter;
    *counter += 1;
    // 198.18.0.0/15 is reserved for testing; one address per guard.
    let address = Ipv4Addr::from(0xc612_0000u32 + n);
    MaliciousGuard {
        fingerprint: Fingerprint::from(format!("adv{n:012}").as_str()),
        asn,
        address,
        offered_bandwidth: offered,
        active: true,
    }
}

/// Uniform draw from the observed guard bandwidths.
fn empirical_bandwidth<R: Rng + ?Sized>(snapshot: &NetworkSnapshot, rng: &mut R) -> f64 {
    let bws: Vec<f64> = snapshot.guards().map(|r| r.bandwidth_mbps).collect();
    *bws.choose(rng).expect("snapshot has guards")
}

/// One relay in a random AS of the routing table, with an address inside
/// one of that AS's prefixes and an empirically sampled bandwidth.
pub fn inject_low_resource<R: Rng + ?Sized>(
    snapshot: &NetworkSnapshot,
    prefixes: &PrefixMap,
    counter: &mut u32,
    rng: &mut R,
) -> MaliciousGuard {
    let entries = prefixes.entries();
    let ases: Vec<Asn> = {
        let mut seen: BTreeSet<Asn> = BTreeSet::new();
        entries.iter().for_each(|(_, _, a)| {
            seen.insert(*a);
        });
        seen.into_iter().collect()
    };
    let asn = *ases.choose(rng).expect("prefix map has ASes");
    let owned: Vec<(Ipv4Addr, u8)> = entries
        .iter()
        .filter(|(_, _, a)| *a == asn)
        .map(|(p, l, _)| (*p, *l))
        .collect();
    let (prefix, len) = *owned.choose(rng).expect("AS owns a prefix");
    let host_bits = 32 - u32::from(len);
    let offset = if host_bits == 0 {
        0
    } else {
        rng.random_range(0..(1u64 << host_bits)) as u32
    };
    let address = Ipv4Addr::from(u32::from(prefix) | offset);
    let offered = empirical_bandwidth(snapshot, rng);
    let mut g = mint_guard(counter, asn, offered);
    g.address = address;
    g
}

/// Guards sampled from the empirical bandwidth distribution, all placed in
/// one uniformly chosen guard AS, until the budget fraction is covered.
pub fn inject_centralized<R: Rng + ?Sized>(
    snapshot: &NetworkSnapshot,
    guard_ases: &[Asn],
    fraction: f64,
    counter: &mut u32,
    rng: &mut R,
) -> Vec<MaliciousGuard> {
    let target = fraction * snapshot.total_guard_bandwidth();
    if target <= 0.0 {
        return Vec::new();
    }
    let asn = *guard_ases.choose(rng).expect("network has guard ASes");
    let mut out = Vec::new();
    let mut spent = 0.0;
    while spent < target {
        let bw = empirical_bandwidth(snapshot, rng);
        spent += bw;
        out.push(mint_guard(counter, asn, bw));
    }
    out
}

/// As centralized, but every guard lands in an independently chosen AS.
pub fn inject_botnet<R: Rng + ?Sized>(
    snapshot: &NetworkSnapshot,
    guard_ases: &[Asn],
    fraction: f64,
    counter: &mut u32,
    rng: &mut R,
) -> Vec<MaliciousGuard> {
    let target = fraction * snapshot.total_guard_bandwidth();
    if target <= 0.0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut spent = 0.0;
    while spent < target {
        let asn = *guard_ases.choose(rng).expect("network has guard ASes");
        let bw = empirical_bandwidth(snapshot, rng);
        spent += bw;
        out.push(mint_guard(counter, asn, bw));
    }
    out
}

/// Set bandwidth under `honest` guard bandwidths, with `own` overriding the
/// attacker's relays. Guards in neither map count zero (departing).
fn projected_set_bandwidth(
    state: &BwState,
    set: &BwSet,
    honest: &BTreeMap<Fingerprint, f64>,
    own: &BTreeMap<Fingerprint, f64>,
) -> f64 {
    set.members()
        .iter()
        .map(|(fp, n_here)| {
            let total = state.guard_quantum_count(fp).max(1);
            let bw = own
                .get(fp)
                .copied()
                .or_else(|| honest.get(fp).copied())
                .unwrap_or(0.0);
            bw / f64::from(total) * f64::from(*n_here)
        })
        .sum()
}

/// Quantum bandwidths the honest leftover pool will hold under `honest`
/// bandwidths: unplaced guards re-quantize daily.
fn projected_leftover(
    state: &BwState,
    honest: &BTreeMap<Fingerprint, f64>,
    own_fps: &BTreeSet<Fingerprint>,
    tau_up: f64,
) -> Vec<f64> {
    let mut out = Vec::new();
    for (fp, bw) in honest {
        if own_fps.contains(fp) || state.is_placed(fp) {
            continue;
        }
        let count = quantum_count(*bw, tau_up);
        for _ in 0..count {
            out.push(*bw / f64::from(count));
        }
    }
    out
}

/// The offer that slips one relay into a damaged set's repair: just above
/// the last candidate quantum the repair would otherwise consume, capped to
/// the window. None when the window sits below the guard-flag floor.
fn plan_infiltration(
    state: &BwState,
    set: &BwSet,
    projected_bw: f64,
    leftover: &[f64],
    thresholds: Thresholds,
    epsilon: f64,
) -> Option<f64> {
    let wmax = state.window_max(set.id).ok()?;
    let lo = 0.5 * wmax;
    if wmax < BANDWIDTH_FLOOR {
        return None;
    }
    let mut cands: Vec<f64> = leftover
        .iter()
        .copied()
        .filter(|q| *q >= lo && *q <= wmax)
        .collect();
    cands.sort_by(|a, b| b.total_cmp(a));
    let mut acc = projected_bw;
    let mut last = None;
    for q in &cands {
        if acc >= thresholds.tau_up {
            break;
        }
        acc += q;
        last = Some(*q);
    }
    let offer = if acc >= thresholds.tau_up {
        let lastfix = last.expect("repair that completes consumed a candidate");
        (lastfix + epsilon).min(wmax)
    } else {
        // Repair will fall short either way; the cheapest windowed offer
        // still gets consumed.
        (lo + epsilon).min(wmax)
    };
    Some(offer.max(BANDWIDTH_FLOOR))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TuneActions {
    pub holds: u32,
    pub infiltrations: u32,
    pub forced_sets: u32,
    pub withdrawals: u32,
    pub relocations: u32,
    pub decays: u32,
}

/// The bandwidth-tuning attacker against quantum sets. Owns a fleet of
/// relays whose offered bandwidths it rewrites daily.
pub struct BwTuner {
    pub config: AdversaryConfig,
    guards: Vec<MaliciousGuard>,
    /// Set id -> first day re-entry is allowed again (low variant).
    cooldown: BTreeMap<u64, u32>,
    counter: u32,
}

impl BwTuner {
    pub fn new(config: AdversaryConfig) -> Self {
        BwTuner {
            config,
            guards: Vec::new(),
            cooldown: BTreeMap::new(),
            counter: 0,
        }
    }

    /// Relays to announce in tomorrow's consensus.
    pub fn offers(&self) -> Vec<(Fingerprint, f64)> {
        self.guards
            .iter()
            .filter(|g| g.active)
            .map(|g| (g.fingerprint.clone(), g.offered_bandwidth))
            .collect()
    }

    pub fn malicious_fingerprints(&self) -> BTreeSet<Fingerprint> {
        self.guards.iter().map(|g| g.fingerprint.clone()).collect()
    }

    pub fn active_bandwidth(&self) -> f64 {
        self.guards
            .iter()
            .filter(|g| g.active)
            .map(|g| g.offered_bandwidth)
            .sum()
    }

    pub fn guard(&self, fp: &Fingerprint) -> Option<&MaliciousGuard> {
        self.guards.iter().find(|g| &g.fingerprint == fp)
    }

    fn own_index(&self, fp: &Fingerprint) -> Option<usize> {
        self.guards.iter().position(|g| &g.fingerprint == fp)
    }

    /// A relay free to retune: active but unplaced, else dormant, else new.
    fn idle_guard(
        &mut self,
        placed: &BTreeSet<Fingerprint>,
        used: &BTreeSet<usize>,
    ) -> usize {
        let free = |g: &MaliciousGuard| !placed.contains(&g.fingerprint);
        if let Some(i) = self
            .guards
            .iter()
            .position(|g| g.active && free(g) && !used.contains(&self.own_index(&g.fingerprint).unwrap()))
        {
            return i;
        }
        if let Some(i) = self.guards.iter().position(|g| !g.active) {
            self.guards[i].active = true;
            return i;
        }
        let asn = Asn::new(TUNER_ASN).expect("reserved ASN is valid");
        self.guards.push(mint_guard(&mut self.counter, asn, BANDWIDTH_FLOOR));
        self.guards.len() - 1
    }

    /// Whether raising or activating is allowed: every other active relay's
    /// spend must sit under budget, so only the final relay may overshoot.
    fn within_budget(&self, budget: f64, except: Option<usize>) -> bool {
        let others: f64 = self
            .guards
            .iter()
            .enumerate()
            .filter(|(i, g)| g.active && Some(*i) != except)
            .map(|(_, g)| g.offered_bandwidth)
            .sum();
        others < budget
    }

    /// One day of tuning against the observed state. `honest_tomorrow` is
    /// the attacker's foreknowledge; threshold mode ignores it.
    pub fn step(
        &mut self,
        state: &BwState,
        honest_total_today: f64,
        honest_tomorrow: &BTreeMap<Fingerprint, f64>,
        thresholds: Thresholds,
        day: u32,
    ) -> TuneActions {
        let mut actions = TuneActions::default();
        let budget = self.config.bandwidth_fraction * honest_total_today;
        let low = self.config.strategy == Strategy::BwTuningLow;
        let eps = self.config.epsilon_mbps;
        let own_fps = self.malicious_fingerprints();
        let placed: BTreeSet<Fingerprint> = state
            .sets()
            .iter()
            .flat_map(|s| s.members().iter().map(|(fp, _)| fp.clone()))
            .collect();
        self.cooldown.retain(|_, until| *until > day);

        // Surplus relays sharing a set relocate; the cheapest stays.
        for set in state.sets() {
            let mut mine: Vec<usize> = set
                .members()
                .iter()
                .filter_map(|(fp, _)| self.own_index(fp))
                .collect();
            mine.sort_by(|a, b| {
                self.guards[*a]
                    .offered_bandwidth
                    .total_cmp(&self.guards[*b].offered_bandwidth)
                    .then_with(|| self.guards[*a].fingerprint.cmp(&self.guards[*b].fingerprint))
            });
            mine.dedup();
            for &i in mine.iter().skip(1) {
                self.guards[i].active = false;
                self.guards[i].offered_bandwidth = BANDWIDTH_FLOOR;
                actions.relocations += 1;
            }
        }

        // Low variant: never dominate a set.
        if low {
            for set in state.sets() {
                let Some(i) = set
                    .members()
                    .iter()
                    .find_map(|(fp, _)| self.own_index(fp).filter(|i| self.guards[*i].active))
                else {
                    continue;
                };
                let total = state.set_bandwidth(set);
                let share = state.quantum_value(&self.guards[i].fingerprint)
                    * f64::from(
                        set.members()
                            .iter()
                            .find(|(fp, _)| fp == &self.guards[i].fingerprint)
                            .map(|(_, n)| *n)
                            .unwrap_or(0),
                    );
                if total > 0.0 && share / total > self.config.main_provider_fraction {
                    self.guards[i].active = false;
                    self.guards[i].offered_bandwidth = BANDWIDTH_FLOOR;
                    self.cooldown
                        .insert(set.id, day + self.config.reentry_cooldown_days);
                    actions.withdrawals += 1;
                }
            }
        }

        // Hold or decay every set we sit in.
        let alive_level = match self.config.foresight {
            Foresight::Perfect => thresholds.tau_down,
            Foresight::Threshold => thresholds.tau_down + 2.0,
        };
        for set in state.sets() {
            let Some(i) = set
                .members()
                .iter()
                .find_map(|(fp, _)| self.own_index(fp).filter(|i| self.guards[*i].active))
            else {
                continue;
            };
            let own: BTreeMap<Fingerprint, f64> = self
                .guards
                .iter()
                .filter(|g| g.active)
                .map(|g| (g.fingerprint.clone(), g.offered_bandwidth))
                .collect();
            let estimate = match self.config.foresight {
                Foresight::Perfect => {
                    projected_set_bandwidth(state, set, honest_tomorrow, &own)
                }
                Foresight::Threshold => state.set_bandwidth(set),
            };
            if estimate <= alive_level {
                let need = alive_level - estimate + eps;
                let raised = (self.guards[i].offered_bandwidth + need)
                    .min(2.0 * thresholds.tau_up - eps);
                if self.within_budget(budget, Some(i)) {
                    self.guards[i].offered_bandwidth = raised;
                    actions.holds += 1;
                }
            } else {
                let slack = estimate - alive_level;
                let cut = self
                    .config
                    .decay_step_mbps
                    .min(slack - eps)
                    .min(self.guards[i].offered_bandwidth - BANDWIDTH_FLOOR);
                if cut > 0.0 {
                    self.guards[i].offered_bandwidth -= cut;
                    actions.decays += 1;
                }
            }
        }

        // Infiltrate sets that are about to fall into repair.
        let own_map: BTreeMap<Fingerprint, f64> = self
            .guards
            .iter()
            .filter(|g| g.active)
            .map(|g| (g.fingerprint.clone(), g.offered_bandwidth))
            .collect();
        let leftover = projected_leftover(state, honest_tomorrow, &own_fps, thresholds.tau_up);
        let mut used: BTreeSet<usize> = BTreeSet::new();
        for set in state.sets() {
            if set
                .members()
                .iter()
                .any(|(fp, _)| own_fps.contains(fp))
            {
                continue;
            }
            if low && self.cooldown.contains_key(&set.id) {
                continue;
            }
            let (projected, damaged) = match self.config.foresight {
                Foresight::Perfect => {
                    let all_gone = set
                        .members()
                        .iter()
                        .all(|(fp, _)| !honest_tomorrow.contains_key(fp));
                    let p = projected_set_bandwidth(state, set, honest_tomorrow, &own_map);
                    (p, !all_gone && p < thresholds.tau_down)
                }
                Foresight::Threshold => {
                    let t = state.set_bandwidth(set);
                    (t, t <= thresholds.tau_down + 2.0)
                }
            };
            if !damaged {
                continue;
            }
            let Some(offer) =
                plan_infiltration(state, set, projected, &leftover, thresholds, eps)
            else {
                continue;
            };
            if !self.within_budget(budget, None) {
                continue;
            }
            let i = self.idle_guard(&placed, &used);
            self.guards[i].offered_bandwidth = offer;
            used.insert(i);
            actions.infiltrations += 1;
        }

        // Force a fresh set out of the leftover pool when it is close.
        let leftover_total: f64 = leftover.iter().sum();
        let max_leftover = leftover.iter().copied().fold(0.0, f64::max);
        let headroom = budget - self.active_bandwidth();
        let pending_force = self.guards.iter().any(|g| {
            g.active
                && !placed.contains(&g.fingerprint)
                && g.offered_bandwidth > max_leftover
        });
        if !pending_force
            && leftover_total + headroom > thresholds.tau_up
            && self.within_budget(budget, None)
        {
            let offer = (max_leftover + eps)
                .max(thresholds.tau_up - leftover_total + eps)
                .max(BANDWIDTH_FLOOR)
                .min(2.0 * thresholds.tau_up - eps);
            let i = self.idle_guard(&placed, &used);
            self.guards[i].offered_bandwidth = offer;
            actions.forced_sets += 1;
        }

        actions
    }
}

/// Attacker chasing one client: infiltrate her guard set the moment it
/// needs repair, then keep it alive.
pub struct TargetedAttacker {
    pub config: AdversaryConfig,
    guards: Vec<MaliciousGuard>,
    counter: u32,
    pub compromised_day: Option<u32>,
    pub peak_bandwidth: f64,
    pub injected_total: f64,
}

impl TargetedAttacker {
    pub fn new(config: AdversaryConfig) -> Self {
        TargetedAttacker {
            config,
            guards: Vec::new(),
            counter: 0,
            compromised_day: None,
            peak_bandwidth: 0.0,
            injected_total: 0.0,
        }
    }

    pub fn offers_bw(&self) -> Vec<(Fingerprint, f64)> {
        self.guards
            .iter()
            .filter(|g| g.active)
            .map(|g| (g.fingerprint.clone(), g.offered_bandwidth))
            .collect()
    }

    pub fn offers_as(&self) -> Vec<(Fingerprint, f64, Asn)> {
        self.guards
            .iter()
            .filter(|g| g.active)
            .map(|g| (g.fingerprint.clone(), g.offered_bandwidth, g.asn))
            .collect()
    }

    pub fn malicious_fingerprints(&self) -> BTreeSet<Fingerprint> {
        self.guards.iter().map(|g| g.fingerprint.clone()).collect()
    }

    pub fn active_bandwidth(&self) -> f64 {
        self.guards
            .iter()
            .filter(|g| g.active)
            .map(|g| g.offered_bandwidth)
            .sum()
    }

    fn note_spend(&mut self) {
        self.peak_bandwidth = self.peak_bandwidth.max(self.active_bandwidth());
    }

    fn keep_only(&mut self, fp: &Fingerprint) {
        for g in &mut self.guards {
            if &g.fingerprint != fp {
                g.active = false;
            }
        }
    }

    /// One day against the quantum-set design. Returns whether the target
    /// is (now or already) compromised.
    pub fn step_bw(
        &mut self,
        state: &BwState,
        target: &ClientState,
        honest_tomorrow: &BTreeMap<Fingerprint, f64>,
        thresholds: Thresholds,
        day: u32,
    ) -> bool {
        let eps = self.config.epsilon_mbps;
        let own_fps = self.malicious_fingerprints();
        let Some(set_id) = target.bw_set_id else {
            return false;
        };
        let Ok(set) = state.set(set_id) else {
            // Set dismantled; the target recovers elsewhere first.
            return self.compromised_day.is_some();
        };
        let landed = set.members().iter().find(|(fp, _)| own_fps.contains(fp));

        let own_map: BTreeMap<Fingerprint, f64> = self
            .guards
            .iter()
            .filter(|g| g.active)
            .map(|g| (g.fingerprint.clone(), g.offered_bandwidth))
            .collect();
        let projected = projected_set_bandwidth(state, set, honest_tomorrow, &own_map);

        if let Some((fp, _)) = landed {
            let fp = fp.clone();
            if self.compromised_day.is_none() {
                self.compromised_day = Some(day);
                self.keep_only(&fp);
            }
            // Hold the set above the dismantle threshold.
            if projected < thresholds.tau_down {
                let i = self.guards.iter().position(|g| g.fingerprint == fp).unwrap();
                let need = thresholds.tau_down - projected + eps;
                self.guards[i].offered_bandwidth = (self.guards[i].offered_bandwidth + need)
                    .min(2.0 * thresholds.tau_up - eps);
                self.injected_total += need;
            }
            self.note_spend();
            return true;
        }

        // Relays stuck in other sets are useless against this target.
        for g in &mut self.guards {
            if g.active && state.is_placed(&g.fingerprint) {
                g.active = false;
            }
        }

        let damaged = match self.config.foresight {
            Foresight::Perfect => {
                let all_gone = set
                    .members()
                    .iter()
                    .all(|(fp, _)| !honest_tomorrow.contains_key(fp));
                !all_gone && projected < thresholds.tau_down
            }
            Foresight::Threshold => state.set_bandwidth(set) <= thresholds.tau_down + 2.0,
        };
        if damaged {
            let leftover =
                projected_leftover(state, honest_tomorrow, &own_fps, thresholds.tau_up);
            if let Some(offer) =
                plan_infiltration(state, set, projected, &leftover, thresholds, eps)
            {
                if let Some(i) = self.guards.iter().position(|g| !g.active) {
                    self.guards[i].active = true;
                    self.guards[i].offered_bandwidth = offer;
                } else {
                    let asn = Asn::new(TUNER_ASN).expect("reserved ASN is valid");
                    self.guards.push(mint_guard(&mut self.counter, asn, offer));
                }
                self.injected_total += offer;
                self.note_spend();
            }
        }
        false
    }

    /// One day against the cone hierarchy: when the target's subset is
    /// about to fall into repair, flood one of its member ASes with exactly
    /// the bandwidth the repairs will consume.
    pub fn step_as<R: Rng + ?Sized>(
        &mut self,
        hierarchy: &Hierarchy,
        target: &ClientState,
        honest_tomorrow: &BTreeMap<Fingerprint, (f64, Asn)>,
        thresholds: Thresholds,
        day: u32,
        rng: &mut R,
    ) -> bool {
        let eps = self.config.epsilon_mbps;
        let own_fps = self.malicious_fingerprints();
        let Some(subset_id) = target.subset_id else {
            return false;
        };
        let Some((_, set, subset)) = hierarchy.locate_subset(subset_id) else {
            return self.compromised_day.is_some();
        };

        let own_offers: BTreeMap<Fingerprint, f64> = self
            .guards
            .iter()
            .map(|g| {
                (
                    g.fingerprint.clone(),
                    if g.active { g.offered_bandwidth } else { 0.0 },
                )
            })
            .collect();
        let project_subset = |sub: &crate::hierarchy::Subset| -> f64 {
            sub.guards()
                .iter()
                .map(|g| {
                    own_offers.get(g).copied().unwrap_or_else(|| {
                        honest_tomorrow.get(g).map(|(bw, _)| *bw).unwrap_or(0.0)
                    })
                })
                .sum()
        };

        if let Some(fp) = subset.guards().iter().find(|g| own_fps.contains(*g)) {
            let fp = fp.clone();
            if self.compromised_day.is_none() {
                self.compromised_day = Some(day);
                self.keep_only(&fp);
            }
            // Hold the containing set above its dismantle threshold.
            let set_projected: f64 = set
                .subsets()
                .iter()
                .map(project_subset)
                .sum();
            if set_projected < thresholds.tau_down {
                let need = thresholds.tau_down - set_projected + eps;
                let i = self.guards.iter().position(|g| g.fingerprint == fp).unwrap();
                self.guards[i].offered_bandwidth += need;
                self.injected_total += need;
            }
            self.note_spend();
            return true;
        }

        let damaged = match self.config.foresight {
            Foresight::Perfect => project_subset(subset) < thresholds.tau_down,
            Foresight::Threshold => {
                hierarchy.subset_bandwidth(subset) <= thresholds.tau_down + 2.0
            }
        };
        if damaged {
            let member_ases: BTreeSet<Asn> = subset
                .guards()
                .iter()
                .filter_map(|g| hierarchy.guard_asn(g))
                .collect();
            let choices: Vec<Asn> = member_ases.into_iter().collect();
            if let Some(&chosen) = choices.choose(rng) {
                // Every broken sibling holding the chosen AS will bid for
                // our relays; cover all their deficits.
                for sub in set.subsets() {
                    let projected = project_subset(sub);
                    if projected >= thresholds.tau_down {
                        continue;
                    }
                    let uses_as = sub
                        .guards()
                        .iter()
                        .any(|g| hierarchy.guard_asn(g) == Some(chosen));
                    if !uses_as {
                        continue;
                    }
                    let deficit = thresholds.tau_up - projected + eps;
                    self.guards
                        .push(mint_guard(&mut self.counter, chosen, deficit));
                    self.injected_total += deficit;
                }
                self.note_spend();
            }
        }
        false
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScanSummary {
    /// Guard sets (subsets, quantum sets, or single guards) holding at
    /// least one malicious relay.
    pub compromised_sets: usize,
    /// Clients whose current assignment is compromised today.
    pub compromised_clients: usize,
}

/// Latch every client whose subset holds a malicious guard.
pub fn compromise_scan_as(
    hierarchy: &Hierarchy,
    malicious: &BTreeSet<Fingerprint>,
    clients: &mut [ClientState],
    day: u32,
    parallel: bool,
) -> ScanSummary {
    let mut bad_subsets: BTreeSet<u64> = BTreeSet::new();
    for ss in hierarchy.supersets() {
        for set in ss.sets() {
            for sub in set.subsets() {
                if sub.guards().iter().any(|g| malicious.contains(g)) {
                    bad_subsets.insert(sub.id);
                }
            }
        }
    }
    exec::for_each_mut(clients, parallel, |c| {
        let hit = c.subset_id.is_some_and(|id| bad_subsets.contains(&id));
        c.compromised_now = false;
        if hit {
            c.mark_compromised(day);
        }
    });
    ScanSummary {
        compromised_sets: bad_subsets.len(),
        compromised_clients: clients.iter().filter(|c| c.compromised_now).count(),
    }
}

pub fn compromise_scan_bw(
    state: &BwState,
    malicious: &BTreeSet<Fingerprint>,
    clients: &mut [ClientState],
    day: u32,
    parallel: bool,
) -> ScanSummary {
    let bad_sets: BTreeSet<u64> = state
        .sets()
        .iter()
        .filter(|s| s.members().iter().any(|(fp, _)| malicious.contains(fp)))
        .map(|s| s.id)
        .collect();
    exec::for_each_mut(clients, parallel, |c| {
        let hit = c.bw_set_id.is_some_and(|id| bad_sets.contains(&id));
        c.compromised_now = false;
        if hit {
            c.mark_compromised(day);
        }
    });
    ScanSummary {
        compromised_sets: bad_sets.len(),
        compromised_clients: clients.iter().filter(|c| c.compromised_now).count(),
    }
}

pub fn compromise_scan_single(
    malicious: &BTreeSet<Fingerprint>,
    clients: &mut [ClientState],
    day: u32,
    parallel: bool,
) -> ScanSummary {
    exec::for_each_mut(clients, parallel, |c| {
        let hit = c.guard.as_ref().is_some_and(|g| malicious.contains(g));
        c.compromised_now = false;
        if hit {
            c.mark_compromised(day);
        }
    });
    let hit_guards: BTreeSet<&Fingerprint> = clients
        .iter()
        .filter(|c| c.compromised_now)
        .filter_map(|c| c.guard.as_ref())
        .collect();
    ScanSummary {
        compromised_sets: hit_guards.len(),
        compromised_clients: clients.iter().filter(|c| c.compromised_now).count(),
    }
}

pub const ATTACK_TRACE_HEADER: &str =
    "day,sets_compromised,clients_compromised_fraction,adversary_bandwidth,adversary_bandwidth_fraction";

#[derive(Clone, Copy, Debug)]
pub struct AttackDayStats {
    pub day: u32,
    pub sets_compromised: usize,
    pub clients_compromised_fraction: f64,
    pub adversary_bandwidth: f64,
    pub adversary_bandwidth_fraction: f64,
}

pub fn attack_trace_csv(rows: &[AttackDayStats]) -> String {
    let mut out = String::from(ATTACK_TRACE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.3},{:.6}\n",
            r.day,
            r.sets_compromised,
            r.clients_compromised_fraction,
            r.adversary_bandwidth,
            r.adversary_bandwidth_fraction,
        ));
    }
    out
}
