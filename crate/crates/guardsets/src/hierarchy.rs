//! Three-level guard hierarchy: supersets merge provider cones bottom-up,
//! sets pack independent interior cones, subsets pour guards into bandwidth
//! bands. The daily update runs top-down and is deterministic in
//! (inputs, seed).

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::asgraph::{AsGraph, Asn, CustomerCone};
use crate::ids;
use crate::ingest::Fingerprint;

/// Formation and dismantle thresholds plus the merge floor on the number of
/// supersets.
#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
pub struct Thresholds {
    pub tau_up: f64,
    pub tau_down: f64,
    pub n_supersets: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            tau_up: 40.0,
            tau_down: 20.0,
            n_supersets: 50,
        }
    }
}

/// Guards sharing an origin AS on a given day.
#[derive(Clone, Debug)]
pub struct GuardAs {
    pub asn: Asn,
    /// Ascending by fingerprint.
    pub guards: Vec<(Fingerprint, f64)>,
}

impl GuardAs {
    pub fn bandwidth(&self) -> f64 {
        self.guards.iter().map(|(_, bw)| bw).sum()
    }
}

pub type GuardAsMap = BTreeMap<Asn, GuardAs>;

pub fn group_guard_ases(guards: &[(Fingerprint, f64, Asn)]) -> GuardAsMap {
    let mut map: GuardAsMap = BTreeMap::new();
    for (fp, bw, asn) in guards {
        map.entry(*asn)
            .or_insert_with(|| GuardAs {
                asn: *asn,
                guards: Vec::new(),
            })
            .guards
            .push((fp.clone(), *bw));
    }
    for gas in map.values_mut() {
        gas.guards.sort_by(|a, b| a.0.cmp(&b.0));
    }
    map
}

fn members_bandwidth(gas: &GuardAsMap, members: &BTreeSet<Asn>) -> f64 {
    members
        .iter()
        .filter_map(|a| gas.get(a))
        .map(GuardAs::bandwidth)
        .sum()
}

/// Cone lookup that tolerates ASes missing from the relationship data: an
/// unknown AS is its own one-node cone with no providers.
fn cone_of(graph: &AsGraph, a: Asn) -> CustomerCone {
    graph.customer_cone(a).unwrap_or_else(|_| CustomerCone {
        root: a,
        members: Arc::new(BTreeSet::from([a])),
    })
}

fn ancestors_of(graph: &AsGraph, a: Asn) -> Arc<BTreeSet<Asn>> {
    graph.ancestors(a).unwrap_or_default()
}

/// The guard sets themselves: guards poured together until their bandwidth
/// clears the formation threshold.
#[derive(Clone, Debug, Serialize)]
pub struct Subset {
    pub id: u64,
    /// Ascending by fingerprint.
    guards: Vec<Fingerprint>,
}

impl Subset {
    pub fn guards(&self) -> &[Fingerprint] {
        &self.guards
    }
}

/// A packed interior cone, or the residual catch-all of a superset.
#[derive(Clone, Debug, Serialize)]
pub struct Set {
    pub id: u64,
    /// Interior cone root; residual sets have none.
    pub root: Option<Asn>,
    members: BTreeSet<Asn>,
    subsets: Vec<Subset>,
}

impl Set {
    pub fn members(&self) -> &BTreeSet<Asn> {
        &self.members
    }

    pub fn subsets(&self) -> &[Subset] {
        &self.subsets
    }

    pub fn is_residual(&self) -> bool {
        self.root.is_none()
    }
}

/// A merged customer cone holding guard ASes.
#[derive(Clone, Debug, Serialize)]
pub struct Superset {
    pub id: u64,
    pub root: Asn,
    members: BTreeSet<Asn>,
    sets: Vec<Set>,
}

impl Superset {
    pub fn members(&self) -> &BTreeSet<Asn> {
        &self.members
    }

    pub fn sets(&self) -> &[Set] {
        &self.sets
    }
}

/// One provider merge during the superset pass.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MergeEvent {
    pub popped: Asn,
    pub provider: Asn,
    /// Roots of the supersets the provider replaced, ascending.
    pub absorbed: Vec<Asn>,
}

#[derive(Clone, Debug, Default)]
pub struct ChangeLog {
    pub merges: Vec<MergeEvent>,
    pub supersets_created: Vec<u64>,
    pub supersets_dismantled: Vec<u64>,
    pub sets_created: Vec<u64>,
    pub sets_dismantled: Vec<u64>,
    pub subsets_created: Vec<u64>,
    pub subsets_dismantled: Vec<u64>,
    pub repaired_subsets: Vec<u64>,
    /// One per guard moved into an existing subset.
    pub repairs: u32,
}

impl ChangeLog {
    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
            && self.supersets_created.is_empty()
            && self.supersets_dismantled.is_empty()
            && self.sets_created.is_empty()
            && self.sets_dismantled.is_empty()
            && self.subsets_created.is_empty()
            && self.subsets_dismantled.is_empty()
            && self.repaired_subsets.is_empty()
            && self.repairs == 0
    }
}

/// Where one guard currently sits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Location {
    pub superset: u64,
    pub set: u64,
    pub subset: u64,
}

/// An interior cone eligible to become a set.
#[derive(Clone, Debug)]
pub struct ConeCandidate {
    pub cone: CustomerCone,
    /// Guard ASes of the pool the cone contains.
    pub footprint: BTreeSet<Asn>,
    pub bandwidth: f64,
}

pub const DEFAULT_EXACT_PACK_BOUND: usize = 20;

fn fresh_id(level: &str, payload: &[&[u8]], live: &mut HashSet<u64>) -> u64 {
    for salt in 0u64.. {
        let mut parts: Vec<&[u8]> = payload.to_vec();
        let salt_bytes = salt.to_le_bytes();
        if salt > 0 {
            parts.push(&salt_bytes);
        }
        let id = ids::id16(level, &parts);
        if live.insert(id) {
            return id;
        }
    }
    unreachable!()
}

/// All cones rooted strictly inside the superset cone whose pooled guard
/// bandwidth clears `tau_up`. Ascending by root.
pub fn candidate_cones(
    superset_root: Asn,
    pool: &BTreeSet<Asn>,
    gas: &GuardAsMap,
    graph: &AsGraph,
    tau_up: f64,
) -> Vec<ConeCandidate> {
    let outer = cone_of(graph, superset_root);
    let mut roots: BTreeSet<Asn> = BTreeSet::new();
    for &a in pool {
        roots.insert(a);
        roots.extend(ancestors_of(graph, a).iter().copied());
    }
    roots.retain(|r| *r != superset_root && outer.contains(*r));
    let mut out = Vec::new();
    for root in roots {
        let cone = cone_of(graph, root);
        let footprint: BTreeSet<Asn> = pool.iter().copied().filter(|a| cone.contains(*a)).collect();
        if footprint.is_empty() {
            continue;
        }
        let bandwidth = members_bandwidth(gas, &footprint);
        if bandwidth >= tau_up {
            out.push(ConeCandidate {
                cone,
                footprint,
                bandwidth,
            });
        }
    }
    out
}

/// Maximum-cardinality family of candidates with pairwise-disjoint guard-AS
/// footprints. Ties prefer the smaller summed cone size, then the
/// lexicographically smallest root list. Exact search up to `exact_bound`
/// candidates, greedy beyond. Returns indices into `cands`, ascending.
pub fn pack_independent_cones(cands: &[ConeCandidate], exact_bound: usize) -> Vec<usize> {
    if cands.len() <= exact_bound {
        let mut best: Option<(usize, usize, Vec<Asn>, Vec<usize>)> = None;
        let mut chosen = Vec::new();
        let mut used = BTreeSet::new();
        pack_search(cands, 0, &mut chosen, &mut used, &mut best);
        best.map(|(_, _, _, idxs)| idxs).unwrap_or_default()
    } else {
        let mut order: Vec<usize> = (0..cands.len()).collect();
        order.sort_by_key(|&i| {
            (
                cands[i].footprint.len(),
                cands[i].cone.size(),
                cands[i].cone.root,
            )
        });
        let mut used: BTreeSet<Asn> = BTreeSet::new();
        let mut taken = Vec::new();
        for i in order {
            if cands[i].footprint.iter().all(|a| !used.contains(a)) {
                used.extend(cands[i].footprint.iter().copied());
                taken.push(i);
            }
        }
        taken.sort_unstable();
        taken
    }
}

fn pack_search(
    cands: &[ConeCandidate],
    i: usize,
    chosen: &mut Vec<usize>,
    used: &mut BTreeSet<Asn>,
    best: &mut Option<(usize, usize, Vec<Asn>, Vec<usize>)>,
) {
    if let Some((top, _, _, _)) = best {
        if chosen.len() + (cands.len() - i) < *top {
            return;
        }
    }
    if i == cands.len() {
        let count = chosen.len();
        let total: usize = chosen.iter().map(|&j| cands[j].cone.size()).sum();
        let roots: Vec<Asn> = chosen.iter().map(|&j| cands[j].cone.root).collect();
        let better = match best {
            None => true,
            Some((bc, bt, br, _)) => {
                count > *bc || (count == *bc && (total < *bt || (total == *bt && roots < *br)))
            }
        };
        if better {
            *best = Some((count, total, roots, chosen.clone()));
        }
        return;
    }
    if cands[i].footprint.iter().all(|a| !used.contains(a)) {
        chosen.push(i);
        used.extend(cands[i].footprint.iter().copied());
        pack_search(cands, i + 1, chosen, used, best);
        chosen.pop();
        for a in &cands[i].footprint {
            used.remove(a);
        }
    }
    pack_search(cands, i + 1, chosen, used, best);
}

/// Pour guards into groups: visit ASes in `order`, each AS's guards in
/// ascending fingerprint order, closing a group as soon as it reaches
/// `tau_up`. A trailing group under `tau_down` joins the previously closed
/// group when one exists.
fn pour_subsets(
    order: &[Asn],
    pool: &BTreeMap<Asn, Vec<(Fingerprint, f64)>>,
    thresholds: Thresholds,
) -> Vec<Vec<Fingerprint>> {
    let mut groups: Vec<Vec<Fingerprint>> = Vec::new();
    let mut open: Vec<Fingerprint> = Vec::new();
    let mut open_bw = 0.0;
    for asn in order {
        let Some(guards) = pool.get(asn) else { continue };
        for (fp, bw) in guards {
            open.push(fp.clone());
            open_bw += bw;
            if open_bw >= thresholds.tau_up {
                groups.push(std::mem::take(&mut open));
                open_bw = 0.0;
            }
        }
    }
    if !open.is_empty() {
        if open_bw < thresholds.tau_down && !groups.is_empty() {
            groups.last_mut().unwrap().extend(open);
        } else {
            groups.push(open);
        }
    }
    groups
}

#[derive(Clone, Debug)]
pub struct Hierarchy {
    pub seed: u64,
    pub exact_pack_bound: usize,
    day: u32,
    supersets: Vec<Superset>,
    gas: GuardAsMap,
    guard_info: BTreeMap<Fingerprint, (f64, Asn)>,
    index: BTreeMap<Fingerprint, Location>,
}

impl Hierarchy {
    pub fn new(seed: u64) -> Self {
        Hierarchy {
            seed,
            exact_pack_bound: DEFAULT_EXACT_PACK_BOUND,
            day: 0,
            supersets: Vec::new(),
            gas: GuardAsMap::new(),
            guard_info: BTreeMap::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn day(&self) -> u32 {
        self.day
    }

    pub fn supersets(&self) -> &[Superset] {
        &self.supersets
    }

    pub fn guard_as(&self, asn: Asn) -> Option<&GuardAs> {
        self.gas.get(&asn)
    }

    pub fn guard_bandwidth(&self, fp: &Fingerprint) -> Option<f64> {
        self.guard_info.get(fp).map(|(bw, _)| *bw)
    }

    pub fn guard_asn(&self, fp: &Fingerprint) -> Option<Asn> {
        self.guard_info.get(fp).map(|(_, asn)| *asn)
    }

    pub fn superset_bandwidth(&self, ss: &Superset) -> f64 {
        members_bandwidth(&self.gas, &ss.members)
    }

    pub fn set_bandwidth(&self, set: &Set) -> f64 {
        members_bandwidth(&self.gas, &set.members)
    }

    pub fn subset_bandwidth(&self, subset: &Subset) -> f64 {
        subset
            .guards
            .iter()
            .filter_map(|g| self.guard_bandwidth(g))
            .sum()
    }

    /// Supersets too thin to serve clients stay in the structure awaiting a
    /// future merge but never receive assignments.
    pub fn is_orphan(&self, ss: &Superset, thresholds: &Thresholds) -> bool {
        self.superset_bandwidth(ss) < thresholds.tau_down
    }

    pub fn location_of(&self, fp: &Fingerprint) -> Option<Location> {
        self.index.get(fp).copied()
    }

    pub fn assignments(&self) -> impl Iterator<Item = (&Fingerprint, Location)> {
        self.index.iter().map(|(fp, loc)| (fp, *loc))
    }

    pub fn superset(&self, id: u64) -> Option<&Superset> {
        self.supersets.iter().find(|s| s.id == id)
    }

    pub fn locate_set(&self, id: u64) -> Option<(&Superset, &Set)> {
        self.supersets
            .iter()
            .find_map(|ss| ss.sets.iter().find(|s| s.id == id).map(|s| (ss, s)))
    }

    pub fn locate_subset(&self, id: u64) -> Option<(&Superset, &Set, &Subset)> {
        self.supersets.iter().find_map(|ss| {
            ss.sets.iter().find_map(|s| {
                s.subsets
                    .iter()
                    .find(|sub| sub.id == id)
                    .map(|sub| (ss, s, sub))
            })
        })
    }

    fn live_ids(&self) -> HashSet<u64> {
        let mut live = HashSet::new();
        for ss in &self.supersets {
            live.insert(ss.id);
            for set in &ss.sets {
                live.insert(set.id);
                for sub in &set.subsets {
                    live.insert(sub.id);
                }
            }
        }
        live
    }

    /// One day of maintenance: membership refresh, superset merging, set
    /// repacking, subset repair and formation, in that order.
    pub fn full_update(
        &mut self,
        guards: &[(Fingerprint, f64, Asn)],
        graph: &AsGraph,
        thresholds: Thresholds,
    ) -> ChangeLog {
        self.day += 1;
        self.guard_info = guards
            .iter()
            .map(|(fp, bw, asn)| (fp.clone(), (*bw, *asn)))
            .collect();
        self.gas = group_guard_ases(guards);
        let mut live = self.live_ids();
        let mut log = ChangeLog::default();

        let list = std::mem::take(&mut self.supersets);
        self.supersets = refresh_supersets(
            list,
            &self.gas,
            graph,
            thresholds,
            &mut live,
            &mut log,
        );

        let gas = &self.gas;
        let info = &self.guard_info;
        for ss in &mut self.supersets {
            refresh_sets(
                ss,
                gas,
                graph,
                thresholds,
                self.exact_pack_bound,
                &mut live,
                &mut log,
            );
            for set in &mut ss.sets {
                refresh_subsets(
                    set,
                    gas,
                    info,
                    thresholds,
                    self.seed,
                    self.day,
                    &mut live,
                    &mut log,
                );
            }
        }

        self.rebuild_index();
        log
    }

    fn rebuild_index(&mut self) {
        self.index.clear();
        for ss in &self.supersets {
            for set in &ss.sets {
                for sub in &set.subsets {
                    for g in &sub.guards {
                        self.index.insert(
                            g.clone(),
                            Location {
                                superset: ss.id,
                                set: set.id,
                                subset: sub.id,
                            },
                        );
                    }
                }
            }
        }
    }

    /// Structural soundness: containment down the chain, partitions at every
    /// level, no stale or doubly-placed nodes.
    pub fn validate(&self, graph: &AsGraph) -> Result<(), String> {
        let mut placed_as: BTreeSet<Asn> = BTreeSet::new();
        for ss in &self.supersets {
            let outer = cone_of(graph, ss.root);
            let mut in_sets: BTreeSet<Asn> = BTreeSet::new();
            for a in &ss.members {
                if !outer.contains(*a) {
                    return Err(format!("AS {a} outside cone of superset root {}", ss.root));
                }
                if !self.gas.contains_key(a) {
                    return Err(format!("superset {} holds departed AS {a}", ss.id));
                }
                if !placed_as.insert(*a) {
                    return Err(format!("AS {a} in two supersets"));
                }
            }
            for set in &ss.sets {
                if let Some(root) = set.root {
                    let cone = cone_of(graph, root);
                    for a in &set.members {
                        if !cone.contains(*a) {
                            return Err(format!("AS {a} outside cone of set root {root}"));
                        }
                    }
                }
                let mut placed_guards: BTreeSet<&Fingerprint> = BTreeSet::new();
                for a in &set.members {
                    if !ss.members.contains(a) {
                        return Err(format!("set {} holds AS {a} not in its superset", set.id));
                    }
                    if !in_sets.insert(*a) {
                        return Err(format!("AS {a} in two sets of superset {}", ss.id));
                    }
                }
                for sub in &set.subsets {
                    for g in &sub.guards {
                        let Some((_, asn)) = self.guard_info.get(g) else {
                            return Err(format!("subset {} holds departed guard {g}", sub.id));
                        };
                        if !set.members.contains(asn) {
                            return Err(format!(
                                "guard {g} in subset {} but its AS {asn} is outside the set",
                                sub.id
                            ));
                        }
                        if !placed_guards.insert(g) {
                            return Err(format!("guard {g} in two subsets of set {}", set.id));
                        }
                    }
                }
                let expected: usize = set
                    .members
                    .iter()
                    .filter_map(|a| self.gas.get(a))
                    .map(|gas| gas.guards.len())
                    .sum();
                if placed_guards.len() != expected {
                    return Err(format!(
                        "set {} places {} of {} guards",
                        set.id,
                        placed_guards.len(),
                        expected
                    ));
                }
            }
            if in_sets != ss.members {
                return Err(format!("sets of superset {} do not partition it", ss.id));
            }
        }
        let universe: BTreeSet<Asn> = self.gas.keys().copied().collect();
        if placed_as != universe {
            return Err("guard ASes missing from the superset layer".into());
        }
        Ok(())
    }
}

fn refresh_supersets(
    mut list: Vec<Superset>,
    gas: &GuardAsMap,
    graph: &AsGraph,
    thresholds: Thresholds,
    live: &mut HashSet<u64>,
    log: &mut ChangeLog,
) -> Vec<Superset> {
    // Departures first, then whole supersets left empty.
    for ss in &mut list {
        ss.members.retain(|a| gas.contains_key(a));
        for set in &mut ss.sets {
            set.members.retain(|a| gas.contains_key(a));
        }
    }
    list.retain(|ss| {
        if ss.members.is_empty() {
            log.supersets_dismantled.push(ss.id);
            live.remove(&ss.id);
            for set in &ss.sets {
                log.sets_dismantled.push(set.id);
                live.remove(&set.id);
                for sub in &set.subsets {
                    log.subsets_dismantled.push(sub.id);
                    live.remove(&sub.id);
                }
            }
            false
        } else {
            true
        }
    });

    // Newcomers join the most specific covering cone or stand alone.
    let placed: BTreeSet<Asn> = list.iter().flat_map(|s| s.members.iter().copied()).collect();
    let newcomers: Vec<Asn> = gas.keys().copied().filter(|a| !placed.contains(a)).collect();
    for asn in newcomers {
        let mut best: Option<(usize, Asn, usize)> = None;
        for (i, ss) in list.iter().enumerate() {
            let cone = cone_of(graph, ss.root);
            if cone.contains(asn) {
                let key = (cone.size(), ss.root);
                if best.map_or(true, |(cs, r, _)| key < (cs, r)) {
                    best = Some((key.0, key.1, i));
                }
            }
        }
        match best {
            Some((_, _, i)) => {
                list[i].members.insert(asn);
            }
            None => {
                let id = ids::id16("superset", &[&asn.get().to_le_bytes()]);
                live.insert(id);
                log.supersets_created.push(id);
                list.push(Superset {
                    id,
                    root: asn,
                    members: BTreeSet::from([asn]),
                    sets: Vec::new(),
                });
            }
        }
    }

    // Merge pass: pop the smallest cone (deepest first among equals), hand
    // it to the smallest provider cone that also covers another listed
    // superset, and fold in everything under that provider.
    let mut done: Vec<Superset> = Vec::new();
    loop {
        if list.len() < thresholds.n_supersets {
            break;
        }
        if list
            .iter()
            .all(|ss| members_bandwidth(gas, &ss.members) >= thresholds.tau_up)
        {
            break;
        }
        let (pos, _) = list
            .iter()
            .enumerate()
            .min_by_key(|(_, ss)| {
                (
                    cone_of(graph, ss.root).size(),
                    Reverse(ancestors_of(graph, ss.root).len()),
                    ss.root,
                )
            })
            .expect("merge list is nonempty");
        let popped = list.remove(pos);

        let mut provider: Option<(usize, Asn)> = None;
        for &a in ancestors_of(graph, popped.root).iter() {
            let cone = cone_of(graph, a);
            if list.iter().any(|t| cone.contains(t.root)) {
                let key = (cone.size(), a);
                if provider.map_or(true, |p| key < p) {
                    provider = Some(key);
                }
            }
        }
        let Some((_, provider)) = provider else {
            done.push(popped);
            continue;
        };

        let cone = cone_of(graph, provider);
        let mut absorbed_roots = vec![popped.root];
        let mut members = popped.members;
        let mut sets = popped.sets;
        log.supersets_dismantled.push(popped.id);
        live.remove(&popped.id);
        let mut host: Option<Superset> = None;
        let mut keep: Vec<Superset> = Vec::new();
        for t in list.drain(..) {
            if t.root == provider {
                host = Some(t);
            } else if cone.contains(t.root) {
                absorbed_roots.push(t.root);
                log.supersets_dismantled.push(t.id);
                live.remove(&t.id);
                members.extend(t.members);
                sets.extend(t.sets);
            } else {
                keep.push(t);
            }
        }
        list = keep;
        absorbed_roots.sort_unstable();
        log.merges.push(MergeEvent {
            popped: popped.root,
            provider,
            absorbed: absorbed_roots,
        });
        let merged = match host {
            Some(mut h) => {
                h.members.extend(members);
                h.sets.extend(sets);
                h
            }
            None => {
                let id = ids::id16("superset", &[&provider.get().to_le_bytes()]);
                live.insert(id);
                log.supersets_created.push(id);
                Superset {
                    id,
                    root: provider,
                    members,
                    sets,
                }
            }
        };
        list.push(merged);
    }

    done.extend(list);
    done.sort_by_key(|ss| ss.id);
    done
}

fn refresh_sets(
    ss: &mut Superset,
    gas: &GuardAsMap,
    graph: &AsGraph,
    thresholds: Thresholds,
    exact_bound: usize,
    live: &mut HashSet<u64>,
    log: &mut ChangeLog,
) {
    // Unplaced ASes (new joins, or everything on the first day) try the most
    // specific existing cone first.
    let covered: BTreeSet<Asn> = ss
        .sets
        .iter()
        .flat_map(|s| s.members.iter().copied())
        .collect();
    let mut pool: BTreeSet<Asn> = BTreeSet::new();
    let unplaced: Vec<Asn> = ss
        .members
        .iter()
        .copied()
        .filter(|a| !covered.contains(a))
        .collect();
    for asn in unplaced {
        let mut best: Option<(usize, Asn, usize)> = None;
        for (i, set) in ss.sets.iter().enumerate() {
            let Some(root) = set.root else { continue };
            let cone = cone_of(graph, root);
            if cone.contains(asn) {
                let key = (cone.size(), root);
                if best.map_or(true, |(cs, r, _)| key < (cs, r)) {
                    best = Some((key.0, key.1, i));
                }
            }
        }
        match best {
            Some((_, _, i)) => {
                ss.sets[i].members.insert(asn);
            }
            None => {
                pool.insert(asn);
            }
        }
    }

    // Thin cone sets dismantle and release their ASes into the pool. The
    // residual is the catch-all; it dismantles only when empty, otherwise a
    // static thin residual would churn ids every day.
    let mut survivors = Vec::with_capacity(ss.sets.len());
    for set in ss.sets.drain(..) {
        if set.is_residual() && set.members.is_empty() {
            log.sets_dismantled.push(set.id);
            live.remove(&set.id);
            for sub in &set.subsets {
                log.subsets_dismantled.push(sub.id);
                live.remove(&sub.id);
            }
            continue;
        }
        if !set.is_residual() && members_bandwidth(gas, &set.members) < thresholds.tau_down {
            log.sets_dismantled.push(set.id);
            live.remove(&set.id);
            for sub in &set.subsets {
                log.subsets_dismantled.push(sub.id);
                live.remove(&sub.id);
            }
            pool.extend(set.members.iter().copied());
        } else {
            survivors.push(set);
        }
    }
    ss.sets = survivors;

    if !pool.is_empty() {
        let candidates = candidate_cones(ss.root, &pool, gas, graph, thresholds.tau_up);
        let chosen = pack_independent_cones(&candidates, exact_bound);
        for i in chosen {
            let cand = &candidates[i];
            let root_bytes = cand.cone.root.get().to_le_bytes();
            let ss_bytes = ss.root.get().to_le_bytes();
            let id = fresh_id("set", &[&ss_bytes, &root_bytes], live);
            log.sets_created.push(id);
            for a in &cand.footprint {
                pool.remove(a);
            }
            ss.sets.push(Set {
                id,
                root: Some(cand.cone.root),
                members: cand.footprint.clone(),
                subsets: Vec::new(),
            });
        }
        if !pool.is_empty() {
            let residual = ss
                .sets
                .iter_mut()
                .filter(|s| s.is_residual())
                .min_by_key(|s| s.id);
            match residual {
                Some(set) => set.members.extend(pool),
                None => {
                    let ss_bytes = ss.root.get().to_le_bytes();
                    let id = fresh_id("set", &[&ss_bytes, b"residual"], live);
                    log.sets_created.push(id);
                    ss.sets.push(Set {
                        id,
                        root: None,
                        members: pool,
                        subsets: Vec::new(),
                    });
                }
            }
        }
    }
    ss.sets.sort_by_key(|s| s.id);
}

#[allow(clippy::too_many_arguments)]
fn refresh_subsets(
    set: &mut Set,
    gas: &GuardAsMap,
    info: &BTreeMap<Fingerprint, (f64, Asn)>,
    thresholds: Thresholds,
    seed: u64,
    day: u32,
    live: &mut HashSet<u64>,
    log: &mut ChangeLog,
) {
    for sub in &mut set.subsets {
        sub.guards
            .retain(|g| info.get(g).is_some_and(|(_, asn)| set.members.contains(asn)));
    }
    set.subsets.retain(|sub| {
        if sub.guards.is_empty() {
            log.subsets_dismantled.push(sub.id);
            live.remove(&sub.id);
            false
        } else {
            true
        }
    });

    // Pool of guards in member ASes that no surviving subset holds.
    let held: BTreeSet<&Fingerprint> = set
        .subsets
        .iter()
        .flat_map(|s| s.guards.iter())
        .collect();
    let mut pool: BTreeMap<Asn, Vec<(Fingerprint, f64)>> = BTreeMap::new();
    for asn in &set.members {
        let Some(guard_as) = gas.get(asn) else { continue };
        let loose: Vec<(Fingerprint, f64)> = guard_as
            .guards
            .iter()
            .filter(|(fp, _)| !held.contains(fp))
            .cloned()
            .collect();
        if !loose.is_empty() {
            pool.insert(*asn, loose);
        }
    }

    // Damaged subsets recruit from the pool, most damaged first, own ASes
    // before the rest of the set.
    let subset_bw = |sub: &Subset| -> f64 {
        sub.guards
            .iter()
            .filter_map(|g| info.get(g).map(|(bw, _)| *bw))
            .sum()
    };
    let mut damaged: Vec<(u64, f64)> = set
        .subsets
        .iter()
        .map(|s| (s.id, subset_bw(s)))
        .filter(|(_, bw)| *bw < thresholds.tau_down)
        .collect();
    damaged.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    for (id, _) in damaged {
        let sub = set
            .subsets
            .iter_mut()
            .find(|s| s.id == id)
            .expect("damaged subset id is live");
        let own: BTreeSet<Asn> = sub
            .guards
            .iter()
            .filter_map(|g| info.get(g).map(|(_, asn)| *asn))
            .collect();
        let mut queue: Vec<(bool, Asn, Fingerprint, f64)> = pool
            .iter()
            .flat_map(|(asn, guards)| {
                guards
                    .iter()
                    .map(|(fp, bw)| (!own.contains(asn), *asn, fp.clone(), *bw))
            })
            .collect();
        queue.sort_by(|a, b| {
            a.0.cmp(&b.0)
                .then_with(|| a.1.cmp(&b.1))
                .then_with(|| a.2.cmp(&b.2))
        });
        let mut bw = subset_bw(sub);
        let mut moved = 0u32;
        for (_, asn, fp, guard_bw) in queue {
            if bw >= thresholds.tau_up {
                break;
            }
            sub.guards.push(fp.clone());
            bw += guard_bw;
            moved += 1;
            let entry = pool.get_mut(&asn).expect("queued guard is pooled");
            entry.retain(|(g, _)| g != &fp);
            if entry.is_empty() {
                pool.remove(&asn);
            }
        }
        if moved > 0 {
            sub.guards.sort();
            log.repairs += moved;
            log.repaired_subsets.push(id);
        }
    }

    // Whatever remains pours into new subsets behind a per-set shuffle.
    if !pool.is_empty() {
        let mut order: Vec<Asn> = pool.keys().copied().collect();
        let key = ids::fnv_parts(&[&set.id.to_le_bytes(), &u64::from(day).to_le_bytes()]);
        let mut rng = ids::stream(seed, "shuffle", key);
        order.shuffle(&mut rng);
        for mut group in pour_subsets(&order, &pool, thresholds) {
            group.sort();
            let bytes: Vec<&[u8]> = group.iter().map(|fp| fp.as_str().as_bytes()).collect();
            let id = fresh_id("subset", &bytes, live);
            log.subsets_created.push(id);
            set.subsets.push(Subset { id, guards: group });
        }
    }
    set.subsets.sort_by_key(|s| s.id);
}
