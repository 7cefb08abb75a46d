//! Heterogeneous item/session/user graph built from train sessions, and
//! per-item neighbor sampling by random walk with restart.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataio::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeKind {
    Item,
    Session,
    User,
}

impl NodeKind {
    pub const ALL: [NodeKind; 3] = [NodeKind::Item, NodeKind::Session, NodeKind::User];

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            NodeKind::Item => "item",
            NodeKind::Session => "session",
            NodeKind::User => "user",
        }
    }

    pub fn from_ordinal(i: usize) -> Option<NodeKind> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeRef {
    pub kind: NodeKind,
    pub index: usize,
}

impl NodeRef {
    pub fn item(index: usize) -> Self {
        NodeRef { kind: NodeKind::Item, index }
    }
    pub fn session(index: usize) -> Self {
        NodeRef { kind: NodeKind::Session, index }
    }
    pub fn user(index: usize) -> Self {
        NodeRef { kind: NodeKind::User, index }
    }
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.index)
    }
}

/// Graph over items, sessions and users. Nodes also carry a flat id
/// (items first, then sessions, then users) used by the walkers.
#[derive(Clone, Debug)]
pub struct HetGraph {
    counts: [usize; 3],
    /// Directed item transitions with multiplicity, sorted by target.
    item_out: Vec<Vec<(usize, u32)>>,
    /// Undirected membership edges, by flat id, sorted and deduplicated.
    membership: Vec<Vec<usize>>,
    /// Distinct neighbors used for walking: membership edges plus item
    /// transitions in both directions, self-loops excluded.
    walk_adj: Vec<Vec<usize>>,
}

impl HetGraph {
    /// Builds the graph from the train split. Without session nodes only
    /// item-item and item-user edges remain.
    pub fn build(ds: &Dataset, session_nodes: bool) -> HetGraph {
        let n_items = ds.num_items();
        let n_sessions = if session_nodes { ds.train.len() } else { 0 };
        let counts = [n_items, n_sessions, ds.num_users()];
        let total = counts.iter().sum();
        let offset_s = n_items;
        let offset_u = n_items + n_sessions;

        let mut transitions: Vec<BTreeMap<usize, u32>> = vec![BTreeMap::new(); n_items];
        let mut membership: Vec<Vec<usize>> = vec![Vec::new(); total];
        let link = |a: usize, b: usize, m: &mut Vec<Vec<usize>>| {
            m[a].push(b);
            m[b].push(a);
        };
        for (sid, s) in ds.train.iter().enumerate() {
            for w in s.items.windows(2) {
                *transitions[w[0]].entry(w[1]).or_default() += 1;
            }
            let u = offset_u + s.user;
            for &i in &s.items {
                link(i, u, &mut membership);
                if session_nodes {
                    link(i, offset_s + sid, &mut membership);
                }
            }
            if session_nodes {
                link(offset_s + sid, u, &mut membership);
            }
        }
        for adj in &mut membership {
            adj.sort_unstable();
            adj.dedup();
        }

        let mut walk_adj = membership.clone();
        for (src, outs) in transitions.iter().enumerate() {
            for &dst in outs.keys() {
                if dst != src {
                    walk_adj[src].push(dst);
                    walk_adj[dst].push(src);
                }
            }
        }
        for adj in &mut walk_adj {
            adj.sort_unstable();
            adj.dedup();
        }

        HetGraph {
            counts,
            item_out: transitions.into_iter().map(|m| m.into_iter().collect()).collect(),
            membership,
            walk_adj,
        }
    }

    pub fn count(&self, kind: NodeKind) -> usize {
        self.counts[kind.ordinal()]
    }

    pub fn num_nodes(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn flat(&self, node: NodeRef) -> usize {
        let offset: usize = self.counts[..node.kind.ordinal()].iter().sum();
        offset + node.index
    }

    pub fn node(&self, flat: usize) -> NodeRef {
        let mut rest = flat;
        for kind in NodeKind::ALL {
            if rest < self.counts[kind.ordinal()] {
                return NodeRef { kind, index: rest };
            }
            rest -= self.counts[kind.ordinal()];
        }
        panic!("flat id {flat} outside graph of {} nodes", self.num_nodes())
    }

    /// Outgoing transitions of an item with their counts.
    pub fn transitions_from(&self, item: usize) -> &[(usize, u32)] {
        &self.item_out[item]
    }

    /// All directed item transitions `(src, dst, count)`.
    pub fn transitions(&self) -> Vec<(usize, usize, u32)> {
        self.item_out
            .iter()
            .enumerate()
            .flat_map(|(s, outs)| outs.iter().map(move |&(d, c)| (s, d, c)))
            .collect()
    }

    /// Undirected membership edges, each reported once with the endpoint of
    /// lower flat id first.
    pub fn membership_edges(&self) -> Vec<(NodeRef, NodeRef)> {
        let mut out = Vec::new();
        for (a, adj) in self.membership.iter().enumerate() {
            for &b in adj.iter().filter(|&&b| b > a) {
                out.push((self.node(a), self.node(b)));
            }
        }
        out
    }

    pub fn membership_neighbors(&self, node: NodeRef) -> impl Iterator<Item = NodeRef> + '_ {
        self.membership[self.flat(node)].iter().map(|&f| self.node(f))
    }

    /// Distinct neighbors in the walkers' view, as flat ids.
    pub fn walk_neighbors(&self, flat: usize) -> &[usize] {
        &self.walk_adj[flat]
    }

    pub fn degree(&self, node: NodeRef) -> usize {
        self.walk_adj[self.flat(node)].len()
    }

    /// Text dump, one `src dst count` line per edge.
    pub fn write_text(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for (src, dst, c) in self.transitions() {
            s.push_str(&format!("{} {} {c}\n", NodeRef::item(src), NodeRef::item(dst)));
        }
        for (a, b) in self.membership_edges() {
            s.push_str(&format!("{a} {b} 1\n"));
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WalkConfig {
    pub restart_prob: f64,
    pub rwr_list_len: usize,
    /// Neighbor caps indexed by `NodeKind::ordinal`.
    pub caps: [usize; 3],
    pub seed: u64,
}

impl WalkConfig {
    pub fn diginetica() -> Self {
        WalkConfig {
            restart_prob: 0.5,
            rwr_list_len: 100,
            caps: [10, 1, 15],
            seed: 0,
        }
    }

    pub fn tmall() -> Self {
        WalkConfig {
            caps: [1, 15, 1],
            ..Self::diginetica()
        }
    }

    pub fn cap(&self, kind: NodeKind) -> usize {
        self.caps[kind.ordinal()]
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.restart_prob) {
            return Err(Error::Config(format!(
                "restart probability {} outside [0, 1]",
                self.restart_prob
            )));
        }
        if self.rwr_list_len == 0 {
            return Err(Error::Config("rwr_list_len must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for WalkConfig {
    fn default() -> Self {
        Self::diginetica()
    }
}

/// Sampled neighbors of one item: per kind, indices ordered by descending
/// visit count with ascending index breaking ties.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NeighborSet {
    pub lists: [Vec<usize>; 3],
    pub visits: [Vec<u32>; 3],
}

impl NeighborSet {
    pub fn of(&self, kind: NodeKind) -> &[usize] {
        &self.lists[kind.ordinal()]
    }

    pub fn visits_of(&self, kind: NodeKind) -> &[u32] {
        &self.visits[kind.ordinal()]
    }

    pub fn is_empty(&self) -> bool {
        self.lists.iter().all(Vec::is_empty)
    }
}

/// Mixes a base seed with a stream id into an independent generator seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x632b_e59b_d9b4_e019);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Number of distinct nodes of each kind reachable from `start`, excluding it.
pub fn reachable_counts(g: &HetGraph, start: usize) -> [usize; 3] {
    let mut seen = vec![false; g.num_nodes()];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    let mut counts = [0; 3];
    while let Some(v) = queue.pop_front() {
        for &w in g.walk_neighbors(v) {
            if !seen[w] {
                seen[w] = true;
                counts[g.node(w).kind.ordinal()] += 1;
                queue.push_back(w);
            }
        }
    }
    counts
}

/// Random walk with restart from item `start`. The walk runs until it has
/// recorded `rwr_list_len` visits and every kind holds at least
/// `min(cap, reachable)` distinct nodes, or until `10 * rwr_list_len` steps.
pub fn rwr_sample(g: &HetGraph, start: usize, cfg: &WalkConfig) -> Result<NeighborSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, start as u64));
    rwr_sample_with(g, start, cfg, &mut rng)
}

pub fn rwr_sample_with(g: &HetGraph, start: usize, cfg: &WalkConfig, rng: &mut impl Rng) -> Result<NeighborSet> {
    cfg.validate()?;
    if start >= g.count(NodeKind::Item) {
        return Err(Error::Data(format!("item {start} outside graph")));
    }
    if g.walk_neighbors(start).is_empty() {
        return Err(Error::Data(format!("item {start} has no edges to walk")));
    }
    let mut visits: HashMap<usize, u32> = HashMap::new();
    if cfg.restart_prob < 1.0 {
        let reach = reachable_counts(g, start);
        let quota: [usize; 3] = std::array::from_fn(|k| cfg.caps[k].min(reach[k]));
        let mut distinct = [0usize; 3];
        let mut recorded = 0usize;
        let max_steps = 10 * cfg.rwr_list_len;
        let mut cur = start;
        for _ in 0..max_steps {
            if recorded >= cfg.rwr_list_len && (0..3).all(|k| distinct[k] >= quota[k]) {
                break;
            }
            if rng.gen::<f64>() < cfg.restart_prob {
                cur = start;
                continue;
            }
            let adj = g.walk_neighbors(cur);
            cur = adj[rng.gen_range(0..adj.len())];
            if cur != start {
                let c = visits.entry(cur).or_default();
                if *c == 0 {
                    distinct[g.node(cur).kind.ordinal()] += 1;
                }
                *c += 1;
                recorded += 1;
            }
        }
    }
    Ok(rank_visits(g, &visits, &cfg.caps))
}

fn rank_visits(g: &HetGraph, visits: &HashMap<usize, u32>, caps: &[usize; 3]) -> NeighborSet {
    let mut per_kind: [Vec<(usize, u32)>; 3] = Default::default();
    for (&flat, &c) in visits {
        let n = g.node(flat);
        per_kind[n.kind.ordinal()].push((n.index, c));
    }
    let mut out = NeighborSet::default();
    for (k, mut list) in per_kind.into_iter().enumerate() {
        list.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        list.truncate(caps[k]);
        out.lists[k] = list.iter().map(|x| x.0).collect();
        out.visits[k] = list.iter().map(|x| x.1).collect();
    }
    out
}

/// Samples neighbors for every item in parallel; each item draws from its own
/// generator so the result does not depend on thread scheduling. Items with
/// no edges get an empty set.
pub fn sample_all(g: &HetGraph, cfg: &WalkConfig) -> Result<Vec<NeighborSet>> {
    cfg.validate()?;
    (0..g.count(NodeKind::Item))
        .into_par_iter()
        .map(|i| {
            if g.walk_neighbors(i).is_empty() {
                Ok(NeighborSet::default())
            } else {
                rwr_sample(g, i, cfg)
            }
        })
        .collect()
}
