//! Relay ingestion: consensus subsets, snapshot CSVs, prefix-to-AS tables,
//! and the guard eligibility rules.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::net::Ipv4Addr;
use std::sync::Arc;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asgraph::Asn;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate relay fingerprint {0}")]
    DuplicateFingerprint(Fingerprint),
    #[error("no router entries in document")]
    EmptyDocument,
    #[error("bad header: expected {expected:?}, got {got:?}")]
    Header { expected: String, got: String },
}

/// Relay identity. Opaque; ordering is plain byte order.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub struct Fingerprint(Arc<str>);

impl From<String> for Fingerprint {
    fn from(s: String) -> Self {
        Fingerprint(s.into())
    }
}

impl From<&str> for Fingerprint {
    fn from(s: &str) -> Self {
        Fingerprint(s.into())
    }
}

impl From<Fingerprint> for String {
    fn from(f: Fingerprint) -> String {
        f.0.to_string()
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Fingerprint {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

const KNOWN_FLAGS: [&str; 8] = [
    "Exit", "Fast", "Guard", "HSDir", "Running", "Stable", "V2Dir", "Valid",
];

/// Compact relay flag set. Only the flags the simulations care about are
/// kept; anything else in a consensus "s" line is dropped.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub struct RelayFlags(u16);

impl RelayFlags {
    pub const GUARD: RelayFlags = RelayFlags(1 << 2);
    pub const EXIT: RelayFlags = RelayFlags(1 << 0);

    pub fn parse(cell: &str) -> RelayFlags {
        let mut bits = 0u16;
        for name in cell.split(['|', ' ']).filter(|s| !s.is_empty()) {
            if let Some(i) = KNOWN_FLAGS.iter().position(|k| *k == name) {
                bits |= 1 << i;
            }
        }
        RelayFlags(bits)
    }

    pub fn with(self, other: RelayFlags) -> RelayFlags {
        RelayFlags(self.0 | other.0)
    }

    pub fn contains(self, other: RelayFlags) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn is_guard(self) -> bool {
        self.contains(Self::GUARD)
    }

    pub fn is_exit(self) -> bool {
        self.contains(Self::EXIT)
    }
}

impl fmt::Display for RelayFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (i, name) in KNOWN_FLAGS.iter().enumerate() {
            if self.0 & (1 << i) != 0 {
                if !first {
                    f.write_str("|")?;
                }
                f.write_str(name)?;
                first = false;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Relay {
    pub fingerprint: Fingerprint,
    pub address: Ipv4Addr,
    pub bandwidth_mbps: f64,
    pub flags: RelayFlags,
    pub uptime_days: f64,
    pub wfu: f64,
}

/// One day's relay population. Relays are kept sorted by fingerprint and
/// fingerprints are unique.
#[derive(Clone, Debug)]
pub struct NetworkSnapshot {
    pub date: NaiveDate,
    relays: Vec<Relay>,
}

impl NetworkSnapshot {
    pub fn new(date: NaiveDate, mut relays: Vec<Relay>) -> Result<Self, IngestError> {
        relays.sort_by(|a, b| a.fingerprint.cmp(&b.fingerprint));
        for pair in relays.windows(2) {
            if pair[0].fingerprint == pair[1].fingerprint {
                return Err(IngestError::DuplicateFingerprint(pair[0].fingerprint.clone()));
            }
        }
        Ok(NetworkSnapshot { date, relays })
    }

    pub fn relays(&self) -> &[Relay] {
        &self.relays
    }

    pub fn guards(&self) -> impl Iterator<Item = &Relay> {
        self.relays.iter().filter(|r| r.flags.is_guard())
    }

    pub fn exits(&self) -> impl Iterator<Item = &Relay> {
        self.relays.iter().filter(|r| r.flags.is_exit())
    }

    pub fn total_guard_bandwidth(&self) -> f64 {
        self.guards().map(|r| r.bandwidth_mbps).sum()
    }
}

/// Parse the consensus subset this pipeline consumes: "r" lines carry
/// nickname, identity and address, "s" lines flags, "w" lines a Bandwidth=
/// weight in KBps. Entries missing any of the three are skipped and counted.
pub fn parse_consensus(text: &str) -> Result<(NetworkSnapshot, usize), IngestError> {
    #[derive(Default)]
    struct Partial {
        fingerprint: Option<Fingerprint>,
        address: Option<Ipv4Addr>,
        flags: Option<RelayFlags>,
        bandwidth: Option<f64>,
    }

    let mut date = NaiveDate::from_ymd_opt(1970, 1, 1).unwrap();
    let mut relays = Vec::new();
    let mut skipped = 0usize;
    let mut current: Option<Partial> = None;
    let mut saw_router = false;

    let flush = |cur: Option<Partial>, skipped: &mut usize, relays: &mut Vec<Relay>| {
        if let Some(p) = cur {
            match (p.fingerprint, p.address, p.flags, p.bandwidth) {
                (Some(fingerprint), Some(address), Some(flags), Some(bandwidth)) => {
                    relays.push(Relay {
                        fingerprint,
                        address,
                        bandwidth_mbps: bandwidth,
                        flags,
                        uptime_days: 0.0,
                        wfu: 0.0,
                    });
                }
                _ => *skipped += 1,
            }
        }
    };

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let mut tokens = raw.split_ascii_whitespace();
        match tokens.next() {
            Some("valid-after") => {
                if let Some(d) = tokens.next() {
                    date = d.parse().map_err(|_| IngestError::Parse {
                        line,
                        msg: format!("bad valid-after date {d:?}"),
                    })?;
                }
            }
            Some("r") => {
                saw_router = true;
                flush(current.take(), &mut skipped, &mut relays);
                let fields: Vec<&str> = tokens.collect();
                if fields.len() < 5 {
                    return Err(IngestError::Parse {
                        line,
                        msg: format!("router line has {} fields, expected at least 5", fields.len()),
                    });
                }
                let address: Ipv4Addr =
                    fields[fields.len() - 3].parse().map_err(|_| IngestError::Parse {
                        line,
                        msg: format!("bad relay address {:?}", fields[fields.len() - 3]),
                    })?;
                current = Some(Partial {
                    fingerprint: Some(Fingerprint::from(fields[1])),
                    address: Some(address),
                    flags: None,
                    bandwidth: None,
                });
            }
            Some("s") => {
                if let Some(p) = current.as_mut() {
                    p.flags = Some(RelayFlags::parse(&tokens.collect::<Vec<_>>().join(" ")));
                }
            }
            Some("w") => {
                if let Some(p) = current.as_mut() {
                    for t in tokens {
                        if let Some(kbps) = t.strip_prefix("Bandwidth=") {
                            let kbps: f64 = kbps.parse().map_err(|_| IngestError::Parse {
                                line,
                                msg: format!("bad bandwidth weight {t:?}"),
                            })?;
                            p.bandwidth = Some(kbps / 1000.0);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    flush(current.take(), &mut skipped, &mut relays);

    if !saw_router {
        return Err(IngestError::EmptyDocument);
    }
    Ok((NetworkSnapshot::new(date, relays)?, skipped))
}

pub const SNAPSHOT_HEADER: &str = "fingerprint,ip,bandwidth_mbps,flags,uptime_days,wfu";

pub fn write_snapshot_csv(snapshot: &NetworkSnapshot) -> String {
    let mut out = String::from(SNAPSHOT_HEADER);
    out.push('\n');
    for r in &snapshot.relays {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.fingerprint, r.address, r.bandwidth_mbps, r.flags, r.uptime_days, r.wfu
        ));
    }
    out
}

pub fn parse_snapshot_csv(text: &str, date: NaiveDate) -> Result<NetworkSnapshot, IngestError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end() == SNAPSHOT_HEADER => {}
        other => {
            return Err(IngestError::Header {
                expected: SNAPSHOT_HEADER.to_string(),
                got: other.map(|(_, h)| h.to_string()).unwrap_or_default(),
            })
        }
    }
    let mut relays = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        let l = raw.trim_end();
        if l.is_empty() {
            continue;
        }
        let fields: Vec<&str> = l.split(',').collect();
        if fields.len() != 6 {
            return Err(IngestError::Parse {
                line,
                msg: format!("expected 6 fields, got {}", fields.len()),
            });
        }
        let num = |s: &str, what: &str| -> Result<f64, IngestError> {
            s.parse().map_err(|_| IngestError::Parse {
                line,
                msg: format!("bad {what} {s:?}"),
            })
        };
        relays.push(Relay {
            fingerprint: Fingerprint::from(fields[0]),
            address: fields[1].parse().map_err(|_| IngestError::Parse {
                line,
                msg: format!("bad ip {:?}", fields[1]),
            })?,
            bandwidth_mbps: num(fields[2], "bandwidth")?,
            flags: RelayFlags::parse(fields[3]),
            uptime_days: num(fields[4], "uptime")?,
            wfu: num(fields[5], "wfu")?,
        });
    }
    NetworkSnapshot::new(date, relays)
}

/// Longest-prefix-match table from IPv4 prefixes to origin AS.
#[derive(Default, Clone)]
pub struct PrefixMap {
    by_len: Vec<HashMap<u32, Asn>>,
}

impl PrefixMap {
    pub fn new() -> PrefixMap {
        PrefixMap {
            by_len: vec![HashMap::new(); 33],
        }
    }

    fn mask(len: u8) -> u32 {
        if len == 0 {
            0
        } else {
            u32::MAX << (32 - u32::from(len))
        }
    }

    pub fn insert(&mut self, prefix: Ipv4Addr, len: u8, asn: Asn) -> Result<(), IngestError> {
        if self.by_len.is_empty() {
            self.by_len = vec![HashMap::new(); 33];
        }
        if len > 32 {
            return Err(IngestError::Parse {
                line: 0,
                msg: format!("mask length {len} out of range"),
            });
        }
        let key = u32::from(prefix) & Self::mask(len);
        if self.by_len[usize::from(len)].insert(key, asn).is_some() {
            return Err(IngestError::Parse {
                line: 0,
                msg: format!("duplicate prefix {prefix}/{len}"),
            });
        }
        Ok(())
    }

    /// Origin AS for `ip`, longest matching prefix first.
    pub fn lookup(&self, ip: Ipv4Addr) -> Option<Asn> {
        let bits = u32::from(ip);
        for len in (0..=32u8).rev() {
            let table = &self.by_len[usize::from(len)];
            if table.is_empty() {
                continue;
            }
            if let Some(asn) = table.get(&(bits & Self::mask(len))) {
                return Some(*asn);
            }
        }
        None
    }

    /// Every (prefix, len, asn) row, sorted by (asn, prefix, len) so
    /// iteration order is reproducible.
    pub fn entries(&self) -> Vec<(Ipv4Addr, u8, Asn)> {
        let mut out = Vec::with_capacity(self.len());
        for (len, table) in self.by_len.iter().enumerate() {
            for (&bits, &asn) in table {
                out.push((Ipv4Addr::from(bits), len as u8, asn));
            }
        }
        out.sort_by_key(|(p, len, asn)| (*asn, u32::from(*p), *len));
        out
    }

    pub fn len(&self) -> usize {
        self.by_len.iter().map(HashMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn parse(text: &str) -> Result<PrefixMap, IngestError> {
        let mut map = PrefixMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let mut parts = l.split_ascii_whitespace();
            let (Some(prefix), Some(asn), None) = (parts.next(), parts.next(), parts.next())
            else {
                return Err(IngestError::Parse {
                    line,
                    msg: "expected \"<ip>/<masklen> <asn>\"".to_string(),
                });
            };
            let (ip, len) = prefix.split_once('/').ok_or_else(|| IngestError::Parse {
                line,
                msg: format!("bad prefix {prefix:?}"),
            })?;
            let ip: Ipv4Addr = ip.parse().map_err(|_| IngestError::Parse {
                line,
                msg: format!("bad prefix address {ip:?}"),
            })?;
            let len: u8 = len.parse().map_err(|_| IngestError::Parse {
                line,
                msg: format!("bad mask length {len:?}"),
            })?;
            let asn = asn
                .parse::<u32>()
                .ok()
                .and_then(Asn::new)
                .ok_or_else(|| IngestError::Parse {
                    line,
                    msg: format!("bad AS number {asn:?}"),
                })?;
            map.insert(ip, len, asn).map_err(|e| match e {
                IngestError::Parse { msg, .. } => IngestError::Parse { line, msg },
                other => other,
            })?;
        }
        Ok(map)
    }

    pub fn serialize(&self) -> String {
        let mut rows: Vec<(u8, u32, Asn)> = Vec::new();
        for (len, table) in self.by_len.iter().enumerate() {
            for (&bits, &asn) in table {
                rows.push((len as u8, bits, asn));
            }
        }
        rows.sort();
        let mut out = String::new();
        for (len, bits, asn) in rows {
            out.push_str(&format!("{}/{} {}\n", Ipv4Addr::from(bits), len, asn));
        }
        out
    }
}

/// Per-relay uptime and weighted fractional uptime, for documents (like a
/// consensus) that do not carry them inline.
pub type RelayHistory = BTreeMap<Fingerprint, (f64, f64)>;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EligibilityMode {
    /// Trust the consensus Guard flag.
    #[default]
    ConsensusFlag,
    /// Apply the guard criteria to uptime, bandwidth and WFU.
    Criteria,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Select guard-eligible relays. Criteria mode applies the three guard
/// rules: familiar (uptime above 87.5% of relays, or at least eight days),
/// bandwidth above min(median, 2.0 MBps), and WFU above min(median, 0.98).
pub fn eligible_guards<'a>(
    snapshot: &'a NetworkSnapshot,
    history: &RelayHistory,
    mode: EligibilityMode,
) -> Vec<&'a Relay> {
    match mode {
        EligibilityMode::ConsensusFlag => snapshot.guards().collect(),
        EligibilityMode::Criteria => {
            let resolve = |r: &Relay| -> (f64, f64) {
                history
                    .get(&r.fingerprint)
                    .copied()
                    .unwrap_or((r.uptime_days, r.wfu))
            };
            let relays = snapshot.relays();
            let n = relays.len();
            let mut uptimes: Vec<f64> = relays.iter().map(|r| resolve(r).0).collect();
            let mut bws: Vec<f64> = relays.iter().map(|r| r.bandwidth_mbps).collect();
            let mut wfus: Vec<f64> = relays.iter().map(|r| resolve(r).1).collect();
            uptimes.sort_by(f64::total_cmp);
            bws.sort_by(f64::total_cmp);
            wfus.sort_by(f64::total_cmp);
            let bw_bar = median(&bws).min(2.0);
            let wfu_bar = median(&wfus).min(0.98);
            relays
                .iter()
                .filter(|r| {
                    let (uptime, wfu) = resolve(r);
                    let below = uptimes.partition_point(|&u| u < uptime);
                    let familiar = below as f64 >= 0.875 * n as f64 || uptime >= 8.0;
                    familiar && r.bandwidth_mbps > bw_bar && wfu > wfu_bar
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn date() -> NaiveDate {
        NaiveDate::from_ymd_opt(2015, 1, 1).unwrap()
    }

    fn relay(fp: &str, ip: &str, bw: f64, flags: &str, uptime: f64, wfu: f64) -> Relay {
        Relay {
            fingerprint: Fingerprint::from(fp),
            address: ip.parse().unwrap(),
            bandwidth_mbps: bw,
            flags: RelayFlags::parse(flags),
            uptime_days: uptime,
            wfu,
        }
    }

    const CONSENSUS: &str = "\
network-status-version 3 microdesc
valid-after 2015-03-04 12:00:00
r moria1 lpXfw1/+uGB8hxjD8+1G+1L4pqw 2015-03-04 10:21:15 128.31.0.34 9101 9131
s Fast Guard Running Stable V2Dir Valid
w Bandwidth=21900
r skip1 AAAAfw1/+uGB8hxjD8+1G+1L4AAA 2015-03-04 10:21:15 10.1.2.3 9001 0
s Fast Running Valid
r exitish BBBBfw1/+uGB8hxjD8+1G+1LBBBB 2015-03-04 10:21:15 10.9.9.9 9001 0
s Exit Fast Running Valid
w Bandwidth=512
";

    #[test]
    fn consensus_parses_complete_entries_and_counts_skips() {
        let (snap, skipped) = parse_consensus(CONSENSUS).unwrap();
        assert_eq!(skipped, 1);
        assert_eq!(snap.relays().len(), 2);
        assert_eq!(snap.date, NaiveDate::from_ymd_opt(2015, 3, 4).unwrap());
        let moria = snap
            .relays()
            .iter()
            .find(|r| r.fingerprint.as_str() == "lpXfw1/+uGB8hxjD8+1G+1L4pqw")
            .unwrap();
        assert_eq!(moria.address, "128.31.0.34".parse::<Ipv4Addr>().unwrap());
        assert!((moria.bandwidth_mbps - 21.9).abs() < 1e-12);
        assert!(moria.flags.is_guard());
        assert!(!moria.flags.is_exit());
    }

    #[test]
    fn consensus_without_routers_is_an_error() {
        assert!(matches!(
            parse_consensus("network-status-version 3\n"),
            Err(IngestError::EmptyDocument)
        ));
        assert!(matches!(parse_consensus(""), Err(IngestError::EmptyDocument)));
    }

    #[test]
    fn truncated_final_entry_is_skipped() {
        let text = "r a AAA 2015-01-01 00:00:00 10.0.0.1 9001 0\ns Guard\n";
        let (snap, skipped) = parse_consensus(text).unwrap();
        assert_eq!(snap.relays().len(), 0);
        assert_eq!(skipped, 1);
    }

    #[test]
    fn snapshot_csv_roundtrip() {
        let snap = NetworkSnapshot::new(
            date(),
            vec![
                relay("aa", "10.0.0.1", 12.5, "Guard|Fast", 30.0, 0.99),
                relay("bb", "10.0.1.1", 3.25, "Exit", 10.0, 0.95),
            ],
        )
        .unwrap();
        let text = write_snapshot_csv(&snap);
        assert!(text.starts_with(SNAPSHOT_HEADER));
        let back = parse_snapshot_csv(&text, date()).unwrap();
        assert_eq!(back.relays().len(), 2);
        assert_eq!(write_snapshot_csv(&back), text);
    }

    #[test]
    fn snapshot_csv_header_and_row_errors() {
        assert!(matches!(
            parse_snapshot_csv("nope\n", date()),
            Err(IngestError::Header { .. })
        ));
        let bad = format!("{SNAPSHOT_HEADER}\naa,10.0.0.1,xx,Guard,1,1\n");
        match parse_snapshot_csv(&bad, date()) {
            Err(IngestError::Parse { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("bandwidth"));
            }
            _ => panic!("expected parse error"),
        }
    }

    #[test]
    fn duplicate_fingerprints_rejected() {
        let relays = vec![
            relay("aa", "10.0.0.1", 1.0, "Guard", 1.0, 1.0),
            relay("aa", "10.0.0.2", 2.0, "Guard", 1.0, 1.0),
        ];
        assert!(matches!(
            NetworkSnapshot::new(date(), relays),
            Err(IngestError::DuplicateFingerprint(_))
        ));
    }

    #[test]
    fn longest_prefix_wins() {
        let map = PrefixMap::parse("10.0.0.0/8 10\n10.1.0.0/16 20\n10.1.2.0/24 30\n").unwrap();
        let asn = |n| Asn::new(n).unwrap();
        assert_eq!(map.lookup("10.1.2.9".parse().unwrap()), Some(asn(30)));
        assert_eq!(map.lookup("10.1.9.9".parse().unwrap()), Some(asn(20)));
        assert_eq!(map.lookup("10.9.9.9".parse().unwrap()), Some(asn(10)));
        assert_eq!(map.lookup("11.0.0.1".parse().unwrap()), None);
    }

    #[test]
    fn prefix_mask_is_applied_on_insert() {
        let map = PrefixMap::parse("10.0.5.77/20 99\n").unwrap();
        assert_eq!(
            map.lookup("10.0.15.255".parse().unwrap()),
            Some(Asn::new(99).unwrap())
        );
        assert_eq!(map.lookup("10.0.16.0".parse().unwrap()), None);
    }

    #[test]
    fn prefix_table_errors_name_lines() {
        for (text, needle) in [
            ("10.0.0.0/8\n", "expected"),
            ("10.0.0.0/33 5\n", "mask length"),
            ("10.0.0.0/8 0\n", "bad AS number"),
            ("10.0.0.0/8 5\n10.0.0.0/8 6\n", "duplicate prefix"),
        ] {
            match PrefixMap::parse(text) {
                Err(IngestError::Parse { msg, .. }) => {
                    assert!(msg.contains(needle), "{msg:?} vs {needle:?}")
                }
                _ => panic!("expected error for {text:?}"),
            }
        }
    }

    #[test]
    fn prefix_serialize_roundtrip() {
        let text = "10.0.0.0/8 10\n10.1.0.0/16 20\n0.0.0.0/0 7\n";
        let map = PrefixMap::parse(text).unwrap();
        let again = PrefixMap::parse(&map.serialize()).unwrap();
        assert_eq!(map.serialize(), again.serialize());
        assert_eq!(map.len(), 3);
    }

    #[test]
    fn criteria_mode_applies_all_three_rules() {
        // Medians land at 5.0 MBps bandwidth and 0.95 WFU; the candidate
        // passes on the 8-day branch, the 2.0 MBps floor, and WFU > 0.95.
        let relays = vec![
            relay("candidate", "10.0.0.1", 3.0, "", 10.0, 0.99),
            relay("r1", "10.0.0.2", 1.0, "", 100.0, 0.90),
            relay("r2", "10.0.0.3", 5.0, "", 200.0, 0.95),
            relay("r3", "10.0.0.4", 9.0, "", 300.0, 0.97),
            relay("slowpoke", "10.0.0.5", 1.5, "", 400.0, 0.99),
        ];
        let snap = NetworkSnapshot::new(date(), relays).unwrap();
        let picked = eligible_guards(&snap, &RelayHistory::new(), EligibilityMode::Criteria);
        let names: Vec<&str> = picked.iter().map(|r| r.fingerprint.as_str()).collect();
        assert!(names.contains(&"candidate"));
        // Below the bandwidth floor even though older than everyone.
        assert!(!names.contains(&"slowpoke"));
        // Below the WFU bar.
        assert!(!names.contains(&"r1"));
    }

    #[test]
    fn familiarity_rank_branch_without_eight_days() {
        // Uptime 5 days is under the 8-day branch but above 87.5% of relays.
        let mut relays = vec![relay("young", "10.0.0.1", 9.0, "", 5.0, 0.99)];
        for i in 0..7 {
            relays.push(relay(
                &format!("old{i}"),
                &format!("10.0.1.{i}"),
                9.0,
                "",
                1.0,
                0.99,
            ));
        }
        let snap = NetworkSnapshot::new(date(), relays).unwrap();
        let picked = eligible_guards(&snap, &RelayHistory::new(), EligibilityMode::Criteria);
        let names: Vec<&str> = picked.iter().map(|r| r.fingerprint.as_str()).collect();
        assert!(names.contains(&"young"));
        assert!(!names.contains(&"old0"));
    }

    #[test]
    fn history_overrides_consensus_blanks() {
        let relays = vec![
            relay("aa", "10.0.0.1", 9.0, "Guard", 0.0, 0.0),
            relay("bb", "10.0.0.2", 1.0, "", 0.0, 0.0),
        ];
        let snap = NetworkSnapshot::new(date(), relays).unwrap();
        let mut history = RelayHistory::new();
        history.insert(Fingerprint::from("aa"), (30.0, 0.99));
        let picked = eligible_guards(&snap, &history, EligibilityMode::Criteria);
        assert_eq!(picked.len(), 1);
        assert_eq!(picked[0].fingerprint.as_str(), "aa");

        let flagged = eligible_guards(&snap, &history, EligibilityMode::ConsensusFlag);
        assert_eq!(flagged.len(), 1);
    }

    #[test]
    fn flags_render_canonically() {
        let f = RelayFlags::parse("Valid|Guard|Exit");
        assert_eq!(f.to_string(), "Exit|Guard|Valid");
        assert_eq!(RelayFlags::parse("").to_string(), "");
        assert_eq!(RelayFlags::parse("Bogus|Guard").to_string(), "Guard");
    }
}
