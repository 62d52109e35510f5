//! AS-level stream vulnerability: a stream is exposed when some AS sits on
//! both its entry side (client to guard, either direction) and its exit
//! side (exit to destination, either direction). Also the suspect-AS
//! filters clients can layer on top of guard and exit choice.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use thiserror::Error;

use crate::asgraph::Asn;
use crate::assignment::{ClientState, GuardPickPolicy};
use crate::bwsets::BwState;
use crate::exec;
use crate::hierarchy::Hierarchy;
use crate::ingest::Fingerprint;

#[derive(Debug, Error, PartialEq)]
pub enum PathError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown exit AS {0}")]
    UnknownExit(u32),
    #[error("probability {value} outside [0,1] for exit AS {exit}")]
    BadProbability { exit: u32, value: f64 },
    #[error("threshold {0} outside (0,1]")]
    BadThreshold(f64),
}

/// Inter-AS paths, keyed by (source, destination) and queried in both
/// directions independently. Absence is an explicit miss.
#[derive(Clone, Debug, Default)]
pub struct AsPathOracle {
    paths: BTreeMap<(Asn, Asn), Vec<Asn>>,
}

impl AsPathOracle {
    pub fn new() -> AsPathOracle {
        AsPathOracle::default()
    }

    /// Path must already start at its source and end at its destination.
    pub fn insert(&mut self, path: Vec<Asn>) {
        assert!(!path.is_empty());
        let key = (path[0], *path.last().unwrap());
        self.paths.insert(key, path);
    }

    pub fn path(&self, src: Asn, dst: Asn) -> Option<&[Asn]> {
        self.paths.get(&(src, dst)).map(|p| p.as_slice())
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    /// CSV rows "src_asn,dst_asn,path" with the path space-separated. An
    /// optional header row is tolerated.
    pub fn parse_csv(text: &str) -> Result<AsPathOracle, PathError> {
        let mut oracle = AsPathOracle::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let row = raw.trim();
            if row.is_empty() || (i == 0 && row.starts_with("src_asn")) {
                continue;
            }
            let mut cols = row.splitn(3, ',');
            let (Some(src), Some(dst), Some(path)) = (cols.next(), cols.next(), cols.next())
            else {
                return Err(PathError::Parse {
                    line,
                    msg: "expected src_asn,dst_asn,path".into(),
                });
            };
            let parse_asn = |s: &str| -> Result<Asn, PathError> {
                u32::from_str(s.trim())
                    .ok()
                    .and_then(Asn::new)
                    .ok_or_else(|| PathError::Parse {
                        line,
                        msg: format!("bad AS number {s:?}"),
                    })
            };
            let src = parse_asn(src)?;
            let dst = parse_asn(dst)?;
            let hops: Vec<Asn> = path
                .split_whitespace()
                .map(parse_asn)
                .collect::<Result<_, _>>()?;
            if hops.first() != Some(&src) || hops.last() != Some(&dst) {
                return Err(PathError::Parse {
                    line,
                    msg: "path endpoints do not match src/dst".into(),
                });
            }
            oracle.insert(hops);
        }
        Ok(oracle)
    }
}

/// Every AS seen between `a` and `b` in either direction, endpoints
/// included. None when the oracle misses both directions.
pub fn side_ases(oracle: &AsPathOracle, a: Asn, b: Asn) -> Option<BTreeSet<Asn>> {
    if a == b {
        // Same-AS hop never crosses another network.
        return Some(BTreeSet::from([a]));
    }
    let fwd = oracle.path(a, b);
    let rev = oracle.path(b, a);
    if fwd.is_none() && rev.is_none() {
        return None;
    }
    let mut out = BTreeSet::new();
    for p in [fwd, rev].into_iter().flatten() {
        out.extend(p.iter().copied());
    }
    Some(out)
}

/// True when the entry side and exit side share an AS; None when the
/// oracle cannot see one of the sides at all (stream skipped).
pub fn stream_vulnerable(
    client: Asn,
    guard: Asn,
    exit: Asn,
    dest: Asn,
    oracle: &AsPathOracle,
) -> Option<bool> {
    let entry = side_ases(oracle, client, guard)?;
    let exit_side = side_ases(oracle, exit, dest)?;
    Some(entry.intersection(&exit_side).next().is_some())
}

#[derive(Clone, Debug)]
pub struct SuspectConfig {
    pub entry_suspects: BTreeSet<Asn>,
    pub exit_suspects: BTreeSet<Asn>,
    pub threshold: f64,
}

fn asn_set(list: &[u32]) -> BTreeSet<Asn> {
    list.iter().map(|n| Asn::new(*n).unwrap()).collect()
}

impl Default for SuspectConfig {
    fn default() -> Self {
        SuspectConfig {
            entry_suspects: asn_set(&[1299, 3356]),
            exit_suspects: asn_set(&[1299, 3356, 6939, 174, 2914, 3257, 9002, 6453]),
            threshold: 0.1,
        }
    }
}

impl SuspectConfig {
    pub fn validate(&self) -> Result<(), PathError> {
        if self.threshold > 0.0 && self.threshold <= 1.0 {
            Ok(())
        } else {
            Err(PathError::BadThreshold(self.threshold))
        }
    }
}

/// What to do when the oracle cannot see a client-guard path during the
/// guard-set filter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MissPolicy {
    /// Unknown path may hide a suspect: drop the set.
    #[default]
    Closed,
    /// Unknown path is assumed clean.
    Open,
}

/// A set is acceptable only when no entry suspect appears on any
/// client-guard path, in either direction, for any guard in it.
pub fn denasa_guardset_ok(
    client: Asn,
    guard_ases: &[Asn],
    oracle: &AsPathOracle,
    suspects: &SuspectConfig,
    on_miss: MissPolicy,
) -> bool {
    for &g in guard_ases {
        match side_ases(oracle, client, g) {
            Some(ases) => {
                if ases.iter().any(|a| suspects.entry_suspects.contains(a)) {
                    return false;
                }
            }
            None => {
                if on_miss == MissPolicy::Closed {
                    return false;
                }
            }
        }
    }
    true
}

/// How per-suspect probabilities combine into one exit score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Aggregator {
    #[default]
    Max,
    Sum,
}

impl FromStr for Aggregator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max" => Ok(Aggregator::Max),
            "sum" => Ok(Aggregator::Sum),
            other => Err(format!("unknown aggregator {other:?}")),
        }
    }
}

/// Probability of each suspect AS appearing on paths from an exit AS to
/// the destination population.
#[derive(Clone, Debug)]
pub struct ExitProbabilityTable {
    suspects: Vec<Asn>,
    rows: BTreeMap<Asn, Vec<f64>>,
}

impl ExitProbabilityTable {
    pub fn suspects(&self) -> &[Asn] {
        &self.suspects
    }

    pub fn exits(&self) -> impl Iterator<Item = Asn> + '_ {
        self.rows.keys().copied()
    }

    pub fn row(&self, exit: Asn) -> Option<&[f64]> {
        self.rows.get(&exit).map(|r| r.as_slice())
    }

    /// CSV with header "exit_asn,<suspect>,<suspect>,..." and one row per
    /// exit AS.
    pub fn parse_csv(text: &str) -> Result<ExitProbabilityTable, PathError> {
        let mut lines = text.lines().enumerate();
        let Some((_, header)) = lines.next() else {
            return Err(PathError::Parse {
                line: 1,
                msg: "empty table".into(),
            });
        };
        let mut cols = header.split(',');
        cols.next();
        let suspects: Vec<Asn> = cols
            .map(|s| {
                u32::from_str(s.trim())
                    .ok()
                    .and_then(Asn::new)
                    .ok_or_else(|| PathError::Parse {
                        line: 1,
                        msg: format!("bad suspect column {s:?}"),
                    })
            })
            .collect::<Result<_, _>>()?;
        if suspects.is_empty() {
            return Err(PathError::Parse {
                line: 1,
                msg: "no suspect columns".into(),
            });
        }
        let mut rows = BTreeMap::new();
        for (i, raw) in lines {
            let line = i + 1;
            let row = raw.trim();
            if row.is_empty() {
                continue;
            }
            let mut cols = row.split(',');
            let exit = cols
                .next()
                .and_then(|s| u32::from_str(s.trim()).ok())
                .and_then(Asn::new)
                .ok_or_else(|| PathError::Parse {
                    line,
                    msg: "bad exit AS".into(),
                })?;
            let values: Vec<f64> = cols
                .map(|s| {
                    f64::from_str(s.trim()).map_err(|_| PathError::Parse {
                        line,
                        msg: format!("bad probability {s:?}"),
                    })
                })
                .collect::<Result<_, _>>()?;
            if values.len() != suspects.len() {
                return Err(PathError::Parse {
                    line,
                    msg: format!(
                        "expected {} probabilities, found {}",
                        suspects.len(),
                        values.len()
                    ),
                });
            }
            for v in &values {
                if !(0.0..=1.0).contains(v) {
                    return Err(PathError::BadProbability {
                        exit: exit.get(),
                        value: *v,
                    });
                }
            }
            rows.insert(exit, values);
        }
        Ok(ExitProbabilityTable { suspects, rows })
    }
}

/// An exit is acceptable when its aggregated exit-suspect probability is
/// strictly below the threshold.
pub fn denasa_exit_ok(
    table: &ExitProbabilityTable,
    exit: Asn,
    suspects: &SuspectConfig,
    aggregator: Aggregator,
) -> Result<bool, PathError> {
    let row = table
        .row(exit)
        .ok_or(PathError::UnknownExit(exit.get()))?;
    let mut agg = 0.0f64;
    for (asn, p) in table.suspects.iter().zip(row) {
        if !suspects.exit_suspects.contains(asn) {
            continue;
        }
        agg = match aggregator {
            Aggregator::Max => agg.max(*p),
            Aggregator::Sum => agg + *p,
        };
    }
    Ok(agg < suspects.threshold)
}

/// The states a guard distribution can be read out of.
pub enum DesignState<'a> {
    As(&'a Hierarchy),
    Bw(&'a BwState),
    Single,
}

/// The client's guard-pick distribution collapsed to origin ASes.
/// None when the client's assignment cannot be resolved.
pub fn guard_distribution(
    client: &ClientState,
    design: &DesignState,
    asn_of: &BTreeMap<Fingerprint, Asn>,
    policy: GuardPickPolicy,
) -> Option<Vec<(Asn, f64)>> {
    let weighted: Vec<(Fingerprint, f64)> = match design {
        DesignState::As(h) => {
            let (_, _, subset) = h.locate_subset(client.subset_id?)?;
            subset
                .guards()
                .iter()
                .map(|g| {
                    let w = match policy {
                        GuardPickPolicy::Uniform => 1.0,
                        GuardPickPolicy::Weighted => h.guard_bandwidth(g).unwrap_or(0.0),
                    };
                    (g.clone(), w)
                })
                .collect()
        }
        DesignState::Bw(s) => {
            let set = s.set(client.bw_set_id?).ok()?;
            set.members()
                .iter()
                .map(|(g, n)| {
                    let w = match policy {
                        GuardPickPolicy::Uniform => 1.0,
                        GuardPickPolicy::Weighted => {
                            s.quantum_value(g) * f64::from(*n)
                        }
                    };
                    (g.clone(), w)
                })
                .collect()
        }
        DesignState::Single => vec![(client.guard.clone()?, 1.0)],
    };
    let mut by_as: BTreeMap<Asn, f64> = BTreeMap::new();
    let mut total = 0.0;
    for (g, w) in &weighted {
        let Some(asn) = lookup_asn(g, design, asn_of) else {
            continue;
        };
        if *w <= 0.0 {
            continue;
        }
        *by_as.entry(asn).or_insert(0.0) += w;
        total += w;
    }
    if total <= 0.0 {
        return None;
    }
    Some(by_as.into_iter().map(|(a, w)| (a, w / total)).collect())
}

fn lookup_asn(
    g: &Fingerprint,
    design: &DesignState,
    asn_of: &BTreeMap<Fingerprint, Asn>,
) -> Option<Asn> {
    if let DesignState::As(h) = design {
        if let Some(a) = h.guard_asn(g) {
            return Some(a);
        }
    }
    asn_of.get(g).copied()
}

/// One stream request: which client talks to which destination AS.
#[derive(Clone, Copy, Debug)]
pub struct StreamQuery {
    pub client_id: u64,
    pub dest_asn: Asn,
}

/// A client as the stream scorer sees it: its network location and its
/// guard-AS pick distribution (probabilities summing to one).
#[derive(Clone, Debug)]
pub struct ClientSide {
    pub client_id: u64,
    pub client_asn: Asn,
    pub guards: Vec<(Asn, f64)>,
}

#[derive(Clone, Debug, Default)]
pub struct PathsecConfig {
    pub suspects: SuspectConfig,
    pub aggregator: Aggregator,
    /// Apply the suspect-AS filters to guard sets and exits.
    pub denasa: bool,
    pub on_miss: MissPolicy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientRate {
    pub client_id: u64,
    /// Expected vulnerable fraction over scored streams; None when every
    /// stream was skipped or the filter rejected the client's guards.
    pub rate: Option<f64>,
    pub streams: usize,
    pub skipped: usize,
    pub set_dropped: bool,
}

/// Exact expected vulnerable-stream rate per client: every (guard, exit)
/// draw is enumerated with its probability instead of sampled. Guards or
/// exits the oracle cannot see are dropped from the draw (renormalized);
/// a stream with nothing left to draw is skipped.
pub fn vulnerable_stream_rate(
    clients: &[ClientSide],
    streams: &[StreamQuery],
    exits: &[(Asn, f64)],
    oracle: &AsPathOracle,
    table: Option<&ExitProbabilityTable>,
    config: &PathsecConfig,
    parallel: bool,
) -> Vec<ClientRate> {
    let exit_pool: Vec<(Asn, f64)> = if config.denasa {
        match table {
            Some(t) => exits
                .iter()
                .filter(|(a, _)| {
                    denasa_exit_ok(t, *a, &config.suspects, config.aggregator)
                        .unwrap_or(false)
                })
                .copied()
                .collect(),
            None => exits.to_vec(),
        }
    } else {
        exits.to_vec()
    };

    exec::map_vec(clients, parallel, |client| {
        let my_streams: Vec<&StreamQuery> = streams
            .iter()
            .filter(|s| s.client_id == client.client_id)
            .collect();
        let total = my_streams.len();

        if config.denasa {
            let guard_ases: Vec<Asn> = client.guards.iter().map(|(a, _)| *a).collect();
            if !denasa_guardset_ok(
                client.client_asn,
                &guard_ases,
                oracle,
                &config.suspects,
                config.on_miss,
            ) {
                return ClientRate {
                    client_id: client.client_id,
                    rate: None,
                    streams: total,
                    skipped: total,
                    set_dropped: true,
                };
            }
        }

        // Entry side is destination-independent: resolve it once per guard.
        let entries: Vec<(BTreeSet<Asn>, f64)> = client
            .guards
            .iter()
            .filter_map(|(g, p)| side_ases(oracle, client.client_asn, *g).map(|s| (s, *p)))
            .collect();
        let entry_mass: f64 = entries.iter().map(|(_, p)| p).sum();

        let mut scored = 0usize;
        let mut skipped = 0usize;
        let mut acc = 0.0f64;
        for stream in my_streams {
            let exit_sides: Vec<(BTreeSet<Asn>, f64)> = exit_pool
                .iter()
                .filter_map(|(e, w)| {
                    side_ases(oracle, *e, stream.dest_asn).map(|s| (s, *w))
                })
                .collect();
            let exit_mass: f64 = exit_sides.iter().map(|(_, w)| w).sum();
            if entry_mass <= 0.0 || exit_mass <= 0.0 {
                skipped += 1;
                continue;
            }
            let mut p_vuln = 0.0;
            for (entry, pg) in &entries {
                for (exit_side, pe) in &exit_sides {
                    if entry.intersection(exit_side).next().is_some() {
                        p_vuln += (pg / entry_mass) * (pe / exit_mass);
                    }
                }
            }
            acc += p_vuln;
            scored += 1;
        }
        ClientRate {
            client_id: client.client_id,
            rate: if scored > 0 { Some(acc / scored as f64) } else { None },
            streams: total,
            skipped,
            set_dropped: false,
        }
    })
}

/// Sorted (rate, cumulative fraction) pairs over the clients that scored.
pub fn rate_cdf(rates: &[ClientRate]) -> Vec<(f64, f64)> {
    let mut vals: Vec<f64> = rates.iter().filter_map(|r| r.rate).collect();
    vals.sort_by(|a, b| a.total_cmp(b));
    let n = vals.len() as f64;
    vals.iter()
        .enumerate()
        .map(|(i, v)| (*v, (i + 1) as f64 / n))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn asn(n: u32) -> Asn {
        Asn::new(n).unwrap()
    }

    fn oracle_from(paths: &[&[u32]]) -> AsPathOracle {
        let mut o = AsPathOracle::new();
        for p in paths {
            o.insert(p.iter().map(|n| asn(*n)).collect());
        }
        o
    }

    #[test]
    fn oracle_csv_parses_and_validates() {
        let text = "src_asn,dst_asn,path\n10,30,10 20 30\n30,10,30 25 10\n";
        let o = AsPathOracle::parse_csv(text).unwrap();
        assert_eq!(o.len(), 2);
        assert_eq!(
            o.path(asn(10), asn(30)).unwrap(),
            &[asn(10), asn(20), asn(30)]
        );
        assert!(o.path(asn(20), asn(30)).is_none());

        let bad = AsPathOracle::parse_csv("10,30,10 20 99\n");
        assert!(matches!(bad, Err(PathError::Parse { line: 1, .. })));
        let bad = AsPathOracle::parse_csv("10,zz,10 zz\n");
        assert!(bad.is_err());
    }

    #[test]
    fn disjoint_sides_are_safe_and_shared_transit_is_not() {
        // Entry [C,X,G], exit [E,Y,D]: no shared AS.
        let o = oracle_from(&[&[1, 7, 2], &[3, 8, 4]]);
        assert_eq!(
            stream_vulnerable(asn(1), asn(2), asn(3), asn(4), &o),
            Some(false)
        );
        // Entry [C,T,G], exit [E,T,D]: T watches both sides.
        let o = oracle_from(&[&[1, 9, 2], &[3, 9, 4]]);
        assert_eq!(
            stream_vulnerable(asn(1), asn(2), asn(3), asn(4), &o),
            Some(true)
        );
    }

    #[test]
    fn reverse_direction_counts_toward_the_side() {
        // Forward entry [C,G] avoids T, but the reverse path crosses it.
        let o = oracle_from(&[&[1, 2], &[2, 9, 1], &[3, 9, 4]]);
        assert_eq!(
            stream_vulnerable(asn(1), asn(2), asn(3), asn(4), &o),
            Some(true)
        );
        // Without the reverse path the same stream is safe.
        let o = oracle_from(&[&[1, 2], &[3, 9, 4]]);
        assert_eq!(
            stream_vulnerable(asn(1), asn(2), asn(3), asn(4), &o),
            Some(false)
        );
    }

    #[test]
    fn oracle_miss_on_a_side_skips_the_stream() {
        let o = oracle_from(&[&[3, 9, 4]]);
        assert_eq!(stream_vulnerable(asn(1), asn(2), asn(3), asn(4), &o), None);
        let o = oracle_from(&[&[1, 2]]);
        assert_eq!(stream_vulnerable(asn(1), asn(2), asn(3), asn(4), &o), None);
    }

    #[test]
    fn client_as_on_the_exit_side_counts() {
        // The client's own AS observes the entry side by definition; when
        // the exit path crosses it too, the stream is vulnerable.
        let o = oracle_from(&[&[1, 2], &[3, 1, 4]]);
        assert_eq!(
            stream_vulnerable(asn(1), asn(2), asn(3), asn(4), &o),
            Some(true)
        );
    }

    #[test]
    fn same_as_endpoints_collapse_to_one_hop() {
        let o = oracle_from(&[&[3, 9, 4]]);
        // Guard inside the client's AS: entry side is just {1}.
        assert_eq!(
            stream_vulnerable(asn(1), asn(1), asn(3), asn(4), &o),
            Some(false)
        );
        let o = oracle_from(&[&[3, 1, 4]]);
        assert_eq!(
            stream_vulnerable(asn(1), asn(1), asn(3), asn(4), &o),
            Some(true)
        );
    }

    #[test]
    fn guardset_filter_rejects_suspect_paths() {
        let suspects = SuspectConfig::default();
        suspects.validate().unwrap();
        let tainted = oracle_from(&[&[1, 3356, 2]]);
        assert!(!denasa_guardset_ok(
            asn(1),
            &[asn(2)],
            &tainted,
            &suspects,
            MissPolicy::Closed
        ));
        let clean = oracle_from(&[&[1, 7, 2], &[1, 8, 5]]);
        assert!(denasa_guardset_ok(
            asn(1),
            &[asn(2), asn(5)],
            &clean,
            &suspects,
            MissPolicy::Closed
        ));
        // Any tainted guard poisons the whole set.
        let half = oracle_from(&[&[1, 7, 2], &[1, 1299, 5]]);
        assert!(!denasa_guardset_ok(
            asn(1),
            &[asn(2), asn(5)],
            &half,
            &suspects,
            MissPolicy::Closed
        ));
        // A miss fails closed by default, open when configured.
        let empty = AsPathOracle::new();
        assert!(!denasa_guardset_ok(
            asn(1),
            &[asn(2)],
            &empty,
            &suspects,
            MissPolicy::Closed
        ));
        assert!(denasa_guardset_ok(
            asn(1),
            &[asn(2)],
            &empty,
            &suspects,
            MissPolicy::Open
        ));
    }

    #[test]
    fn exit_acceptance_is_strictly_below_threshold() {
        let table = ExitProbabilityTable::parse_csv(
            "exit_asn,1299,3356\n100,0,0\n200,0.09,0.02\n300,0.1,0.0\n400,0.06,0.05\n",
        )
        .unwrap();
        let suspects = SuspectConfig::default();
        let ok = |e: u32, agg| denasa_exit_ok(&table, asn(e), &suspects, agg).unwrap();
        assert!(ok(100, Aggregator::Max));
        assert!(ok(200, Aggregator::Max));
        assert!(!ok(300, Aggregator::Max), "0.10 is not < 0.1");
        assert!(ok(400, Aggregator::Max));
        assert!(!ok(400, Aggregator::Sum), "0.06 + 0.05 crosses 0.1");
        assert_eq!(
            denasa_exit_ok(&table, asn(999), &suspects, Aggregator::Max),
            Err(PathError::UnknownExit(999))
        );
    }

    #[test]
    fn probability_table_rejects_bad_rows() {
        assert!(matches!(
            ExitProbabilityTable::parse_csv("exit_asn,1299\n100,1.5\n"),
            Err(PathError::BadProbability { exit: 100, .. })
        ));
        assert!(ExitProbabilityTable::parse_csv("exit_asn,1299\n100,0.5,0.5\n").is_err());
        assert!(ExitProbabilityTable::parse_csv("exit_asn\n").is_err());
    }

    /// Four clients, two guards, two exits, two destinations, collision
    /// pattern chosen by hand. The expectation must equal brute-force
    /// enumeration over every (guard, exit) draw.
    fn four_client_fixture() -> (Vec<ClientSide>, Vec<StreamQuery>, Vec<(Asn, f64)>, AsPathOracle)
    {
        let oracle = oracle_from(&[
            // Client 101: guard paths cross T=900 either way.
            &[101, 900, 201],
            &[101, 202],
            // Client 102: clean to both guards.
            &[102, 201],
            &[102, 202],
            // Client 103: reverse path from guard 201 crosses 901.
            &[103, 201],
            &[201, 901, 103],
            &[103, 202],
            // Client 104: guard paths cross the suspect 1299.
            &[104, 1299, 201],
            &[104, 1299, 202],
            // Exit sides.
            &[301, 900, 401], // exit 301 to dest 401 crosses T
            &[301, 402],
            &[302, 901, 401], // exit 302 to dest 401 crosses 901
            &[302, 1299, 402], // exit 302 to dest 402 crosses the suspect
        ]);
        let clients = vec![
            ClientSide {
                client_id: 1,
                client_asn: asn(101),
                guards: vec![(asn(201), 0.5), (asn(202), 0.5)],
            },
            ClientSide {
                client_id: 2,
                client_asn: asn(102),
                guards: vec![(asn(201), 0.25), (asn(202), 0.75)],
            },
            ClientSide {
                client_id: 3,
                client_asn: asn(103),
                guards: vec![(asn(201), 1.0)],
            },
            ClientSide {
                client_id: 4,
                client_asn: asn(104),
                guards: vec![(asn(201), 0.5), (asn(202), 0.5)],
            },
        ];
        let streams = vec![
            StreamQuery { client_id: 1, dest_asn: asn(401) },
            StreamQuery { client_id: 1, dest_asn: asn(402) },
            StreamQuery { client_id: 2, dest_asn: asn(401) },
            StreamQuery { client_id: 3, dest_asn: asn(401) },
            StreamQuery { client_id: 3, dest_asn: asn(402) },
            StreamQuery { client_id: 4, dest_asn: asn(402) },
        ];
        let exits = vec![(asn(301), 30.0), (asn(302), 10.0)];
        (clients, streams, exits, oracle)
    }

    #[test]
    fn rate_matches_brute_force_enumeration() {
        let (clients, streams, exits, oracle) = four_client_fixture();
        let config = PathsecConfig::default();
        let rates =
            vulnerable_stream_rate(&clients, &streams, &exits, &oracle, None, &config, false);

        for client in &clients {
            let got = rates
                .iter()
                .find(|r| r.client_id == client.client_id)
                .unwrap();
            let mut acc = 0.0;
            let mut scored = 0;
            for s in streams.iter().filter(|s| s.client_id == client.client_id) {
                let gmass: f64 = client
                    .guards
                    .iter()
                    .filter(|(g, _)| side_ases(&oracle, client.client_asn, *g).is_some())
                    .map(|(_, p)| p)
                    .sum();
                let emass: f64 = exits
                    .iter()
                    .filter(|(e, _)| side_ases(&oracle, *e, s.dest_asn).is_some())
                    .map(|(_, w)| w)
                    .sum();
                let mut p = 0.0;
                for (g, pg) in &client.guards {
                    for (e, pe) in &exits {
                        if stream_vulnerable(client.client_asn, *g, *e, s.dest_asn, &oracle)
                            == Some(true)
                        {
                            p += (pg / gmass) * (pe / emass);
                        }
                    }
                }
                acc += p;
                scored += 1;
            }
            let want = acc / f64::from(scored);
            assert!(
                (got.rate.unwrap() - want).abs() < 1e-12,
                "client {}: got {:?} want {}",
                client.client_id,
                got.rate,
                want
            );
            assert_eq!(got.skipped, 0);
        }

        // Spot values traced by hand: client 3 collides only via the
        // reverse guard path 901 meeting exit 302 at dest 401 (weight
        // 10/40), and never at dest 402.
        let c3 = rates.iter().find(|r| r.client_id == 3).unwrap();
        assert!((c3.rate.unwrap() - 0.125).abs() < 1e-12);
    }

    #[test]
    fn degenerate_oracles_pin_the_rate_ends() {
        let (clients, streams, exits, _) = four_client_fixture();
        let config = PathsecConfig::default();

        // Every path crosses AS 900: all rates are 1.
        let mut all = AsPathOracle::new();
        for c in &clients {
            for (g, _) in &c.guards {
                all.insert(vec![c.client_asn, asn(900), *g]);
            }
        }
        for (e, _) in &exits {
            for d in [401, 402] {
                all.insert(vec![*e, asn(900), asn(d)]);
            }
        }
        let rates = vulnerable_stream_rate(&clients, &streams, &exits, &all, None, &config, false);
        assert!(rates.iter().all(|r| r.rate == Some(1.0)));

        // Disjoint transit ASes everywhere: all rates are 0.
        let mut none = AsPathOracle::new();
        let mut t = 900;
        for c in &clients {
            for (g, _) in &c.guards {
                none.insert(vec![c.client_asn, asn(t), *g]);
                t += 1;
            }
        }
        for (e, _) in &exits {
            for d in [401, 402] {
                none.insert(vec![*e, asn(t), asn(d)]);
                t += 1;
            }
        }
        let rates =
            vulnerable_stream_rate(&clients, &streams, &exits, &none, None, &config, false);
        assert!(rates.iter().all(|r| r.rate == Some(0.0)));
    }

    #[test]
    fn denasa_filter_never_raises_the_rate_when_only_suspects_collide() {
        // The only AS on both an entry and an exit side anywhere is 6939
        // (an exit-side suspect): client 1's path to guard 201 and exit
        // 302's path to dest 401 cross it. Client 4's entry carries 3356,
        // so the set-level filter rejects it outright.
        let oracle = oracle_from(&[
            &[101, 6939, 201],
            &[101, 802, 202],
            &[102, 803, 201],
            &[103, 804, 201],
            &[103, 805, 202],
            &[104, 3356, 201],
            &[301, 811, 401],
            &[301, 812, 402],
            &[302, 6939, 401],
            &[302, 813, 402],
        ]);
        let clients = vec![
            ClientSide {
                client_id: 1,
                client_asn: asn(101),
                guards: vec![(asn(201), 0.5), (asn(202), 0.5)],
            },
            ClientSide {
                client_id: 2,
                client_asn: asn(102),
                guards: vec![(asn(201), 1.0)],
            },
            ClientSide {
                client_id: 3,
                client_asn: asn(103),
                guards: vec![(asn(201), 0.5), (asn(202), 0.5)],
            },
            ClientSide {
                client_id: 4,
                client_asn: asn(104),
                guards: vec![(asn(201), 1.0)],
            },
        ];
        let streams = vec![
            StreamQuery { client_id: 1, dest_asn: asn(401) },
            StreamQuery { client_id: 1, dest_asn: asn(402) },
            StreamQuery { client_id: 2, dest_asn: asn(401) },
            StreamQuery { client_id: 3, dest_asn: asn(401) },
            StreamQuery { client_id: 3, dest_asn: asn(402) },
            StreamQuery { client_id: 4, dest_asn: asn(401) },
        ];
        let exits = vec![(asn(301), 30.0), (asn(302), 10.0)];
        // Exit 302 concentrates suspect probability; 301 is clean.
        let table = ExitProbabilityTable::parse_csv(
            "exit_asn,1299,6939\n301,0.01,0.0\n302,0.0,0.6\n",
        )
        .unwrap();

        let unfiltered = vulnerable_stream_rate(
            &clients,
            &streams,
            &exits,
            &oracle,
            Some(&table),
            &PathsecConfig::default(),
            false,
        );
        let filtered_cfg = PathsecConfig {
            denasa: true,
            ..PathsecConfig::default()
        };
        let filtered = vulnerable_stream_rate(
            &clients,
            &streams,
            &exits,
            &oracle,
            Some(&table),
            &filtered_cfg,
            false,
        );

        for (u, f) in unfiltered.iter().zip(&filtered) {
            assert_eq!(u.client_id, f.client_id);
            if f.set_dropped {
                assert_eq!(f.client_id, 4);
                continue;
            }
            let (u, f) = (u.rate.unwrap_or(0.0), f.rate.unwrap_or(0.0));
            assert!(f <= u + 1e-12, "filtered {f} > unfiltered {u}");
        }
        // Client 1: guard 201 (p 0.5) meets exit 302 (weight 10/40) via
        // 6939 on dest 401 only, so the unfiltered rate is 0.0625; the
        // filter removes exit 302 and with it the only collision.
        let u1 = unfiltered.iter().find(|r| r.client_id == 1).unwrap();
        assert!((u1.rate.unwrap() - 0.0625).abs() < 1e-12);
        let f1 = filtered.iter().find(|r| r.client_id == 1).unwrap();
        assert_eq!(f1.rate, Some(0.0));
        // Client 4 is exactly the one whose set the filter drops.
        assert!(filtered.iter().any(|r| r.client_id == 4 && r.set_dropped));
    }

    #[test]
    fn guard_distributions_follow_the_design() {
        use crate::asgraph::AsGraph;
        use crate::assignment::Design;
        use crate::hierarchy::Thresholds;

        let th = Thresholds {
            tau_up: 40.0,
            tau_down: 20.0,
            n_supersets: 1,
        };
        let graph = AsGraph::parse_as_rel("1|2|-1\n").unwrap();
        let a2 = asn(2);
        let fps = [Fingerprint::from("g1"), Fingerprint::from("g2")];
        let day = vec![(fps[0].clone(), 30.0, a2), (fps[1].clone(), 10.0, a2)];
        let mut h = Hierarchy::new(7);
        h.full_update(&day, &graph, th);
        let loc = h.location_of(&fps[0]).unwrap();
        let client = ClientState {
            client_id: 1,
            design: Design::As,
            superset_id: Some(loc.superset),
            set_id: Some(loc.set),
            subset_id: Some(loc.subset),
            bw_set_id: None,
            guard: None,
            compromised_ever: false,
            compromise_day: None,
            compromised_now: false,
        };
        let asn_of: BTreeMap<Fingerprint, Asn> = BTreeMap::new();
        let uniform = guard_distribution(
            &client,
            &DesignState::As(&h),
            &asn_of,
            GuardPickPolicy::Uniform,
        )
        .unwrap();
        // Both guards share AS 2, so the distribution collapses to it.
        assert_eq!(uniform, vec![(a2, 1.0)]);

        let weighted = guard_distribution(
            &client,
            &DesignState::As(&h),
            &asn_of,
            GuardPickPolicy::Weighted,
        )
        .unwrap();
        assert_eq!(weighted, vec![(a2, 1.0)]);

        // Single design reads the pinned guard.
        let single = ClientState {
            design: Design::Single,
            guard: Some(fps[0].clone()),
            subset_id: None,
            set_id: None,
            superset_id: None,
            ..client.clone()
        };
        let asn_of: BTreeMap<Fingerprint, Asn> =
            [(fps[0].clone(), asn(5))].into_iter().collect();
        let dist = guard_distribution(
            &single,
            &DesignState::Single,
            &asn_of,
            GuardPickPolicy::Weighted,
        )
        .unwrap();
        assert_eq!(dist, vec![(asn(5), 1.0)]);
    }

    #[test]
    fn cdf_is_sorted_and_ends_at_one() {
        let rates: Vec<ClientRate> = [0.4, 0.1, 0.3]
            .iter()
            .enumerate()
            .map(|(i, r)| ClientRate {
                client_id: i as u64,
                rate: Some(*r),
                streams: 1,
                skipped: 0,
                set_dropped: false,
            })
            .collect();
        let cdf = rate_cdf(&rates);
        assert_eq!(cdf.len(), 3);
        assert!((cdf[0].0 - 0.1).abs() < 1e-12);
        assert!((cdf[2].0 - 0.4).abs() < 1e-12);
        assert!((cdf[2].1 - 1.0).abs() < 1e-12);
        assert!(cdf.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 < w[1].1));
    }
}
