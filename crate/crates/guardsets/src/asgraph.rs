//! AS-level topology: provider/customer relationships, peering, and
//! customer cones computed over the p2c subgraph.
//!
//! Input is the pipe-delimited relationship format ("A|B|-1" provider to
//! customer, "A|B|0" peer to peer, "#" comments). Cones are cached per root;
//! the graph is immutable once parsed, so a replaced graph means a fresh
//! value and fresh caches.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Autonomous system number. Always positive.
#[derive(
    Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Debug, Default,
)]
#[serde(transparent)]
pub struct Asn(u32);

impl Asn {
    pub fn new(n: u32) -> Option<Asn> {
        (n > 0).then_some(Asn(n))
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

impl fmt::Display for Asn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum AsGraphError {
    #[error("as-rel line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown AS {0}")]
    UnknownAs(Asn),
}

/// Customer cone of one AS: the root plus everything reachable over p2c
/// links. The root is always a member of its own cone.
#[derive(Clone, Debug)]
pub struct CustomerCone {
    pub root: Asn,
    pub members: Arc<BTreeSet<Asn>>,
}

impl CustomerCone {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn contains(&self, a: Asn) -> bool {
        self.members.contains(&a)
    }
}

#[derive(Default)]
pub struct AsGraph {
    customers: BTreeMap<Asn, Vec<Asn>>,
    providers: BTreeMap<Asn, Vec<Asn>>,
    peers: BTreeSet<(Asn, Asn)>,
    nodes: BTreeSet<Asn>,
    cone_cache: RwLock<HashMap<Asn, Arc<BTreeSet<Asn>>>>,
    ancestor_cache: RwLock<HashMap<Asn, Arc<BTreeSet<Asn>>>>,
}

impl AsGraph {
    pub fn from_edges(
        p2c: impl IntoIterator<Item = (Asn, Asn)>,
        p2p: impl IntoIterator<Item = (Asn, Asn)>,
    ) -> Result<AsGraph, AsGraphError> {
        let mut g = AsGraph::default();
        for (provider, customer) in p2c {
            g.add_p2c(provider, customer)?;
        }
        for (a, b) in p2p {
            g.add_p2p(a, b)?;
        }
        Ok(g)
    }

    fn add_p2c(&mut self, provider: Asn, customer: Asn) -> Result<(), AsGraphError> {
        if provider == customer {
            return Err(AsGraphError::Parse {
                line: 0,
                msg: format!("self relationship on AS {provider}"),
            });
        }
        self.nodes.insert(provider);
        self.nodes.insert(customer);
        let down = self.customers.entry(provider).or_default();
        if let Err(pos) = down.binary_search(&customer) {
            down.insert(pos, customer);
        }
        let up = self.providers.entry(customer).or_default();
        if let Err(pos) = up.binary_search(&provider) {
            up.insert(pos, provider);
        }
        Ok(())
    }

    fn add_p2p(&mut self, a: Asn, b: Asn) -> Result<(), AsGraphError> {
        if a == b {
            return Err(AsGraphError::Parse {
                line: 0,
                msg: format!("self relationship on AS {a}"),
            });
        }
        self.nodes.insert(a);
        self.nodes.insert(b);
        self.peers.insert((a.min(b), a.max(b)));
        Ok(())
    }

    pub fn parse_as_rel(text: &str) -> Result<AsGraph, AsGraphError> {
        let mut g = AsGraph::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = l.split('|').collect();
            if fields.len() != 3 {
                return Err(AsGraphError::Parse {
                    line,
                    msg: format!("expected 3 pipe-delimited fields, got {}", fields.len()),
                });
            }
            let asn = |s: &str| -> Result<Asn, AsGraphError> {
                s.parse::<u32>()
                    .ok()
                    .and_then(Asn::new)
                    .ok_or_else(|| AsGraphError::Parse {
                        line,
                        msg: format!("bad AS number {s:?}"),
                    })
            };
            let a = asn(fields[0])?;
            let b = asn(fields[1])?;
            let res = match fields[2] {
                "-1" => g.add_p2c(a, b),
                "0" => g.add_p2p(a, b),
                other => Err(AsGraphError::Parse {
                    line,
                    msg: format!("unknown relationship code {other:?}"),
                }),
            };
            res.map_err(|e| match e {
                AsGraphError::Parse { msg, .. } => AsGraphError::Parse { line, msg },
                other => other,
            })?;
        }
        Ok(g)
    }

    pub fn serialize_as_rel(&self) -> String {
        let mut out = String::new();
        for (provider, customers) in &self.customers {
            for customer in customers {
                out.push_str(&format!("{provider}|{customer}|-1\n"));
            }
        }
        for (a, b) in &self.peers {
            out.push_str(&format!("{a}|{b}|0\n"));
        }
        out
    }

    pub fn nodes(&self) -> impl Iterator<Item = Asn> + '_ {
        self.nodes.iter().copied()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn contains(&self, a: Asn) -> bool {
        self.nodes.contains(&a)
    }

    pub fn peer_count(&self) -> usize {
        self.peers.len()
    }

    /// Direct providers, ascending.
    pub fn providers_of(&self, a: Asn) -> Result<&[Asn], AsGraphError> {
        if !self.contains(a) {
            return Err(AsGraphError::UnknownAs(a));
        }
        Ok(self.providers.get(&a).map(Vec::as_slice).unwrap_or(&[]))
    }

    /// Direct customers, ascending.
    pub fn customers_of(&self, a: Asn) -> Result<&[Asn], AsGraphError> {
        if !self.contains(a) {
            return Err(AsGraphError::UnknownAs(a));
        }
        Ok(self.customers.get(&a).map(Vec::as_slice).unwrap_or(&[]))
    }

    /// Customer cone of `root`. Peering never contributes members, and dirty
    /// data with p2c cycles still terminates thanks to the visited set.
    pub fn customer_cone(&self, root: Asn) -> Result<CustomerCone, AsGraphError> {
        if !self.contains(root) {
            return Err(AsGraphError::UnknownAs(root));
        }
        if let Some(members) = self.cone_cache.read().unwrap().get(&root) {
            return Ok(CustomerCone {
                root,
                members: Arc::clone(members),
            });
        }
        let members = Arc::new(self.walk(root, &self.customers));
        self.cone_cache
            .write()
            .unwrap()
            .insert(root, Arc::clone(&members));
        Ok(CustomerCone { root, members })
    }

    pub fn cone_size(&self, root: Asn) -> Result<usize, AsGraphError> {
        Ok(self.customer_cone(root)?.size())
    }

    /// Transitive providers of `a`, self excluded.
    pub fn ancestors(&self, a: Asn) -> Result<Arc<BTreeSet<Asn>>, AsGraphError> {
        if !self.contains(a) {
            return Err(AsGraphError::UnknownAs(a));
        }
        if let Some(up) = self.ancestor_cache.read().unwrap().get(&a) {
            return Ok(Arc::clone(up));
        }
        let mut up = self.walk(a, &self.providers);
        up.remove(&a);
        let up = Arc::new(up);
        self.ancestor_cache
            .write()
            .unwrap()
            .insert(a, Arc::clone(&up));
        Ok(up)
    }

    fn walk(&self, start: Asn, adjacency: &BTreeMap<Asn, Vec<Asn>>) -> BTreeSet<Asn> {
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::new();
        seen.insert(start);
        queue.push_back(start);
        while let Some(cur) = queue.pop_front() {
            if let Some(next) = adjacency.get(&cur) {
                for &n in next {
                    if seen.insert(n) {
                        queue.push_back(n);
                    }
                }
            }
        }
        seen
    }
}
