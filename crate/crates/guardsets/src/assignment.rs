//! Client-to-guard assignment: chained bandwidth-weighted picks down the
//! hierarchy, single-guard baseline, and the recovery ladder that keeps
//! clients as local as possible when their node dismantles.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::{Hierarchy, Thresholds};
use crate::ingest::Fingerprint;

#[derive(Debug, Error, PartialEq)]
pub enum AssignError {
    #[error("no eligible choices with positive weight")]
    NoEligible,
    #[error("weighted pick over all-zero weights")]
    AllZeroWeights,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Design {
    As,
    Bw,
    Single,
}

impl std::fmt::Display for Design {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Design::As => write!(f, "as"),
            Design::Bw => write!(f, "bw"),
            Design::Single => write!(f, "single"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GuardPickPolicy {
    Uniform,
    #[default]
    Weighted,
}

/// One client's placement and compromise record. Only the fields of its
/// design are populated.
#[derive(Clone, Debug, Serialize)]
pub struct ClientState {
    pub client_id: u64,
    pub design: Design,
    pub superset_id: Option<u64>,
    pub set_id: Option<u64>,
    pub subset_id: Option<u64>,
    pub bw_set_id: Option<u64>,
    pub guard: Option<Fingerprint>,
    pub compromised_ever: bool,
    pub compromise_day: Option<u32>,
    /// Whether today's guard set contains a malicious guard; unlike the
    /// latch this can clear again.
    pub compromised_now: bool,
}

impl ClientState {
    pub fn mark_compromised(&mut self, day: u32) {
        self.compromised_now = true;
        if !self.compromised_ever {
            self.compromised_ever = true;
            self.compromise_day = Some(day);
        }
    }
}

/// How far up the ladder a recovery had to climb.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Recovery {
    Unchanged,
    Subset,
    Set,
    Superset,
    Full,
}

/// Index of the item at which the running prefix sum first exceeds
/// u * total. Scaling every weight by a constant leaves the outcome
/// unchanged.
pub fn weighted_pick<T>(items: &[(T, f64)], u: f64) -> Result<usize, AssignError> {
    let total: f64 = items.iter().map(|(_, w)| w.max(0.0)).sum();
    if total <= 0.0 {
        return Err(AssignError::AllZeroWeights);
    }
    let target = u * total;
    let mut acc = 0.0;
    let mut last_positive = None;
    for (i, (_, w)) in items.iter().enumerate() {
        if *w <= 0.0 {
            continue;
        }
        acc += w;
        last_positive = Some(i);
        if acc > target {
            return Ok(i);
        }
    }
    // Rounding can leave acc == target at the end; the last real item wins.
    last_positive.ok_or(AssignError::AllZeroWeights)
}

fn draw<T, R: Rng + ?Sized>(items: &[(T, f64)], rng: &mut R) -> Result<usize, AssignError> {
    weighted_pick(items, rng.random::<f64>())
}

/// Three chained weighted draws: superset, set, subset. Orphan supersets
/// never receive clients.
pub fn assign_client_as<R: Rng + ?Sized>(
    hierarchy: &Hierarchy,
    thresholds: &Thresholds,
    rng: &mut R,
) -> Result<(u64, u64, u64), AssignError> {
    let supersets: Vec<(u64, f64)> = hierarchy
        .supersets()
        .iter()
        .filter(|ss| !hierarchy.is_orphan(ss, thresholds))
        .map(|ss| (ss.id, hierarchy.superset_bandwidth(ss)))
        .collect();
    if supersets.is_empty() {
        return Err(AssignError::NoEligible);
    }
    let ss_id = supersets[draw(&supersets, rng)?].0;
    let ss = hierarchy.superset(ss_id).expect("picked superset is live");

    let sets: Vec<(u64, f64)> = ss
        .sets()
        .iter()
        .map(|s| (s.id, hierarchy.set_bandwidth(s)))
        .collect();
    let set_id = sets[draw(&sets, rng)?].0;
    let (_, set) = hierarchy.locate_set(set_id).expect("picked set is live");

    let subsets: Vec<(u64, f64)> = set
        .subsets()
        .iter()
        .map(|s| (s.id, hierarchy.subset_bandwidth(s)))
        .collect();
    let subset_id = subsets[draw(&subsets, rng)?].0;
    Ok((ss_id, set_id, subset_id))
}

/// Bandwidth-weighted pick over quantum sets.
pub fn assign_client_bw<R: Rng + ?Sized>(
    sets: &[(u64, f64)],
    rng: &mut R,
) -> Result<u64, AssignError> {
    if sets.is_empty() {
        return Err(AssignError::NoEligible);
    }
    let i = draw(sets, rng)?;
    Ok(sets[i].0)
}

/// Bandwidth-weighted pick over individual guards.
pub fn assign_client_single<R: Rng + ?Sized>(
    guards: &[(Fingerprint, f64)],
    rng: &mut R,
) -> Result<Fingerprint, AssignError> {
    if guards.is_empty() {
        return Err(AssignError::NoEligible);
    }
    let i = draw(guards, rng)?;
    Ok(guards[i].0.clone())
}

/// Pick one guard out of a guard set for circuit building.
pub fn pick_guard<R: Rng + ?Sized>(
    guards: &[(Fingerprint, f64)],
    policy: GuardPickPolicy,
    rng: &mut R,
) -> Result<Fingerprint, AssignError> {
    if guards.is_empty() {
        return Err(AssignError::NoEligible);
    }
    match policy {
        GuardPickPolicy::Uniform => Ok(guards[rng.random_range(0..guards.len())].0.clone()),
        GuardPickPolicy::Weighted => {
            let i = draw(guards, rng)?;
            Ok(guards[i].0.clone())
        }
    }
}

/// Recovery ladder: keep the subset if it survived, else stay inside the
/// set, else inside the superset, else reassign globally. An orphaned
/// superset sends the client back to global assignment.
pub fn recover_client_as<R: Rng + ?Sized>(
    client: &mut ClientState,
    hierarchy: &Hierarchy,
    thresholds: &Thresholds,
    rng: &mut R,
) -> Result<Recovery, AssignError> {
    let subset_id = client.subset_id.expect("AS-design client has a subset");
    if let Some((ss, set, _)) = hierarchy.locate_subset(subset_id) {
        // An orphaned superset loses its clients even while their subsets
        // survive inside it.
        if !hierarchy.is_orphan(ss, thresholds) {
            // Containers can be renamed by merges while the subset lives on.
            client.superset_id = Some(ss.id);
            client.set_id = Some(set.id);
            return Ok(Recovery::Unchanged);
        }
    } else if let Some(set_id) = client.set_id {
        if let Some((ss, set)) = hierarchy.locate_set(set_id) {
            if !hierarchy.is_orphan(ss, thresholds) {
                let subsets: Vec<(u64, f64)> = set
                    .subsets()
                    .iter()
                    .map(|s| (s.id, hierarchy.subset_bandwidth(s)))
                    .collect();
                let i = draw(&subsets, rng)?;
                client.superset_id = Some(ss.id);
                client.subset_id = Some(subsets[i].0);
                return Ok(Recovery::Subset);
            }
        }
    }

    if let Some(ss_id) = client.superset_id {
        if let Some(ss) = hierarchy.superset(ss_id) {
            if !hierarchy.is_orphan(ss, thresholds) {
                let sets: Vec<(u64, f64)> = ss
                    .sets()
                    .iter()
                    .map(|s| (s.id, hierarchy.set_bandwidth(s)))
                    .collect();
                let set_id = sets[draw(&sets, rng)?].0;
                let (_, set) = hierarchy.locate_set(set_id).expect("picked set is live");
                let subsets: Vec<(u64, f64)> = set
                    .subsets()
                    .iter()
                    .map(|s| (s.id, hierarchy.subset_bandwidth(s)))
                    .collect();
                let i = draw(&subsets, rng)?;
                client.set_id = Some(set_id);
                client.subset_id = Some(subsets[i].0);
                return Ok(Recovery::Set);
            }
        }
    }

    let (ss_id, set_id, subset_id) = assign_client_as(hierarchy, thresholds, rng)?;
    client.superset_id = Some(ss_id);
    client.set_id = Some(set_id);
    client.subset_id = Some(subset_id);
    Ok(Recovery::Full)
}

/// BW design has one level: a dismantled set means a weighted re-pick over
/// every surviving set.
pub fn recover_client_bw<R: Rng + ?Sized>(
    client: &mut ClientState,
    alive_sets: &[(u64, f64)],
    rng: &mut R,
) -> Result<Recovery, AssignError> {
    let set_id = client.bw_set_id.expect("BW-design client has a set");
    if alive_sets.iter().any(|(id, _)| *id == set_id) {
        return Ok(Recovery::Unchanged);
    }
    if alive_sets.is_empty() {
        return Err(AssignError::NoEligible);
    }
    let i = draw(alive_sets, rng)?;
    client.bw_set_id = Some(alive_sets[i].0);
    Ok(Recovery::Full)
}

pub fn recover_client_single<R: Rng + ?Sized>(
    client: &mut ClientState,
    guards: &[(Fingerprint, f64)],
    rng: &mut R,
) -> Result<Recovery, AssignError> {
    let guard = client.guard.as_ref().expect("single-design client has a guard");
    if guards.iter().any(|(fp, _)| fp == guard) {
        return Ok(Recovery::Unchanged);
    }
    client.guard = Some(assign_client_single(guards, rng)?);
    Ok(Recovery::Full)
}

pub const CLIENT_TABLE_HEADER: &str =
    "client_id,design,superset_id,set_id,subset_id,bw_set_id,guard_fingerprint,compromised_ever,compromise_day";

pub fn client_table_csv(clients: &[ClientState]) -> String {
    let mut out = String::from(CLIENT_TABLE_HEADER);
    out.push('\n');
    let id = |v: Option<u64>| v.map(|x| crate::ids::render_id(x)).unwrap_or_default();
    for c in clients {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            c.client_id,
            c.design,
            id(c.superset_id),
            id(c.set_id),
            id(c.subset_id),
            id(c.bw_set_id),
            c.guard.as_ref().map(|g| g.as_str()).unwrap_or(""),
            c.compromised_ever,
            c.compromise_day.map(|d| d.to_string()).unwrap_or_default(),
        ));
    }
    out
}
