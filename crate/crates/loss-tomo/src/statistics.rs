//! Sufficient statistics per internal node: reach indicators, intersection
//! counts over descendant subsets, union counts, and empirical rates.
//!
//! All counts are exact integers; rates are derived on demand and never
//! stored rounded. Computation for distinct nodes is independent, so callers
//! may fan nodes out across threads over a shared observation matrix.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::bitset::ProbeSet;
use crate::simulator::ObservationMatrix;
use crate::topology::{GeneralTopology, MulticastTree, TopologyError};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("node {0} is a leaf: reach indicators need at least one descendant")]
    LeafNode(String),
    #[error("fan-out {fanout} exceeds the subset enumeration cap {cap}; use grouped estimation")]
    CapExceeded { fanout: usize, cap: usize },
    #[error("fan-out {0} exceeds the representable limit of 64 descendants")]
    FanOutTooLarge(usize),
    #[error("node {0} is unreachable from every source with probes")]
    NoSource(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

/// Default cap on full subset enumeration (2^cap - 1 subsets).
pub const DEFAULT_ENUMERATION_CAP: usize = 16;

/// A subset of a node's descendants, as a bitmask over child positions.
pub type SubsetMask = u64;

/// Lists the child positions set in a mask.
pub fn mask_members(mask: SubsetMask) -> Vec<usize> {
    (0..64).filter(|b| mask >> b & 1 == 1).collect()
}

/// Per-probe reach indicators for one internal node: `Y_j = 1` iff at least
/// one receiver in the subtree below child `j` observed the probe.
#[derive(Debug, Clone)]
pub struct ReachIndicators {
    pub node: String,
    pub children: Vec<String>,
    /// One probe set per child, over the probes considered.
    pub sets: Vec<ProbeSet>,
    /// Total probes considered (including probes seen nowhere below the node).
    pub n: usize,
}

impl ReachIndicators {
    /// Builds indicators for node `k` of a tree over all probes.
    pub fn for_tree_node(
        obs: &ObservationMatrix,
        tree: &MulticastTree,
        node: &str,
    ) -> Result<Self, StatsError> {
        let topo = tree.topology();
        let ix = topo.node_index(node)?;
        Self::for_node_rows(obs, topo, ix, 0, obs.n_probes())
    }

    /// Builds indicators for `node` over the probe rows `[start, start+len)`.
    pub fn for_node_rows(
        obs: &ObservationMatrix,
        topo: &GeneralTopology,
        node: usize,
        start: usize,
        len: usize,
    ) -> Result<Self, StatsError> {
        let children = topo.children(node);
        if children.is_empty() {
            return Err(StatsError::LeafNode(topo.node_name(node).to_string()));
        }
        let mut sets = Vec::with_capacity(children.len());
        let mut names = Vec::with_capacity(children.len());
        for &(child, _) in children {
            let mut set = ProbeSet::new(len);
            for &col in topo.receiver_cols_below(child) {
                let col_set = obs.column(col);
                for i in 0..len {
                    if col_set.contains(start + i) {
                        set.insert(i);
                    }
                }
            }
            sets.push(set);
            names.push(topo.node_name(child).to_string());
        }
        Ok(ReachIndicators {
            node: topo.node_name(node).to_string(),
            children: names,
            sets,
            n: len,
        })
    }

    pub fn indicator(&self, child: usize, probe: usize) -> bool {
        self.sets[child].contains(probe)
    }
}

/// Where a node's per-probe structure lives: explicit probe sets from an
/// observation matrix, or exact pattern counts (how many probes were seen by
/// exactly each subset of children). Pattern counts carry the same
/// information at any probe scale.
#[derive(Debug, Clone)]
enum Backing {
    Sets(Vec<ProbeSet>),
    Patterns(BTreeMap<SubsetMask, u64>),
}

/// Intersection counts `I(x)` and empirical rates for one node.
///
/// Singleton and pairwise counts are materialized eagerly; larger subsets are
/// counted on demand (`materialize`), with zero counts pruned through the
/// antitone property: if `I(x) = 0` every superset of `x` is zero without
/// touching the probe data.
#[derive(Debug, Clone)]
pub struct NodeStats {
    pub node: String,
    pub children: Vec<String>,
    /// Total probes considered.
    pub n: u64,
    /// n_k(1): probes observed by at least one descendant subtree.
    pub nk1: u64,
    counts: BTreeMap<SubsetMask, u64>,
    backing: Backing,
    cap: usize,
}

impl NodeStats {
    /// Counts intersections over the reach indicators. Fan-outs above 64 are
    /// unrepresentable; fan-outs above `cap` still get singleton/pair counts
    /// (enough for classification and grouped estimation) but full subset
    /// enumeration is refused later.
    pub fn from_indicators(ind: &ReachIndicators, cap: usize) -> Result<Self, StatsError> {
        let d = ind.sets.len();
        if d > 64 {
            return Err(StatsError::FanOutTooLarge(d));
        }
        let nk1 = ProbeSet::union_of(ind.n, ind.sets.iter()).count_ones();
        let mut stats = NodeStats {
            node: ind.node.clone(),
            children: ind.children.clone(),
            n: ind.n as u64,
            nk1,
            counts: BTreeMap::new(),
            backing: Backing::Sets(ind.sets.clone()),
            cap,
        };
        stats.fill_base_counts();
        Ok(stats)
    }

    /// Builds stats directly from per-child probe sets.
    pub fn from_sets(
        node: &str,
        children: Vec<String>,
        sets: Vec<ProbeSet>,
        n: u64,
        cap: usize,
    ) -> Result<Self, StatsError> {
        let ind = ReachIndicators {
            node: node.to_string(),
            children,
            sets,
            n: n as usize,
        };
        let mut stats = Self::from_indicators(&ind, cap)?;
        stats.n = n;
        Ok(stats)
    }

    /// Builds stats from exact pattern counts: `patterns[p]` is the number of
    /// probes observed by exactly the children in mask `p`. Probes seen by no
    /// child (`p = 0`) may be listed or implied by `n`.
    pub fn from_pattern_counts(
        node: &str,
        children: Vec<String>,
        patterns: BTreeMap<SubsetMask, u64>,
        n: u64,
        cap: usize,
    ) -> Result<Self, StatsError> {
        let d = children.len();
        if d > 64 {
            return Err(StatsError::FanOutTooLarge(d));
        }
        let seen: u64 = patterns
            .iter()
            .filter(|(&m, _)| m != 0)
            .map(|(_, &c)| c)
            .sum();
        debug_assert!(seen <= n);
        let mut stats = NodeStats {
            node: node.to_string(),
            children,
            n,
            nk1: seen,
            counts: BTreeMap::new(),
            backing: Backing::Patterns(patterns),
            cap,
        };
        stats.fill_base_counts();
        Ok(stats)
    }

    /// Assembles stats from precomputed parts (reference implementations that
    /// count by their own route).
    pub fn from_parts(
        node: String,
        children: Vec<String>,
        sets: Vec<ProbeSet>,
        n: u64,
        nk1: u64,
        counts: BTreeMap<SubsetMask, u64>,
        cap: usize,
    ) -> Self {
        NodeStats {
            node,
            children,
            n,
            nk1,
            counts,
            backing: Backing::Sets(sets),
            cap,
        }
    }

    fn fill_base_counts(&mut self) {
        let d = self.fanout();
        for j in 0..d {
            let m = 1u64 << j;
            let c = self.count_raw(m);
            self.counts.insert(m, c);
        }
        for i in 0..d {
            for j in i + 1..d {
                let m = 1u64 << i | 1u64 << j;
                let c = self.count_raw(m);
                self.counts.insert(m, c);
            }
        }
    }

    pub fn fanout(&self) -> usize {
        self.children.len()
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn full_mask(&self) -> SubsetMask {
        if self.fanout() == 64 {
            u64::MAX
        } else {
            (1u64 << self.fanout()) - 1
        }
    }

    fn count_raw(&self, mask: SubsetMask) -> u64 {
        match &self.backing {
            Backing::Sets(sets) => {
                let members: Vec<&ProbeSet> =
                    mask_members(mask).into_iter().map(|j| &sets[j]).collect();
                ProbeSet::intersection_count(&members)
            }
            Backing::Patterns(pats) => pats
                .iter()
                .filter(|(&p, _)| p & mask == mask)
                .map(|(_, &c)| c)
                .sum(),
        }
    }

    /// I(x) for a non-empty subset mask, counting on demand. Zero counts
    /// propagate to supersets without scanning.
    pub fn count(&self, mask: SubsetMask) -> u64 {
        debug_assert!(mask != 0 && mask <= self.full_mask());
        if let Some(&c) = self.counts.get(&mask) {
            return c;
        }
        for (&m, &c) in &self.counts {
            if c == 0 && m & mask == m {
                return 0;
            }
        }
        self.count_raw(mask)
    }

    /// Like `count`, also memoizing the result for the dump and later calls.
    pub fn materialize(&mut self, mask: SubsetMask) -> u64 {
        let c = self.count(mask);
        self.counts.insert(mask, c);
        c
    }

    /// Union count over a group of children: probes observed by at least one
    /// member of `mask`.
    pub fn union_count(&self, mask: SubsetMask) -> u64 {
        match &self.backing {
            Backing::Sets(sets) => {
                let members = mask_members(mask);
                ProbeSet::union_of(
                    sets.first().map_or(0, |s| s.len()),
                    members.iter().map(|&j| &sets[j]),
                )
                .count_ones()
            }
            Backing::Patterns(pats) => pats
                .iter()
                .filter(|(&p, _)| p & mask != 0)
                .map(|(_, &c)| c)
                .sum(),
        }
    }

    /// Probes observed by at least one member of `a` and at least one member
    /// of `b`.
    pub fn joint_union_count(&self, a: SubsetMask, b: SubsetMask) -> u64 {
        match &self.backing {
            Backing::Sets(sets) => {
                let ga: Vec<&ProbeSet> = mask_members(a).into_iter().map(|j| &sets[j]).collect();
                let gb: Vec<&ProbeSet> = mask_members(b).into_iter().map(|j| &sets[j]).collect();
                ProbeSet::joint_union_count(&ga, &gb)
            }
            Backing::Patterns(pats) => pats
                .iter()
                .filter(|(&p, _)| p & a != 0 && p & b != 0)
                .map(|(_, &c)| c)
                .sum(),
        }
    }

    /// n_j(1) for one child.
    pub fn child_count(&self, j: usize) -> u64 {
        self.counts[&(1u64 << j)]
    }

    /// Empirical rate n_k(1)/n.
    pub fn gamma_hat(&self) -> f64 {
        self.nk1 as f64 / self.n as f64
    }

    /// Empirical rate n_j(1)/n for one child.
    pub fn child_gamma_hat(&self, j: usize) -> f64 {
        self.child_count(j) as f64 / self.n as f64
    }

    /// alpha_j = n_j(1)/n_k(1).
    pub fn alpha_hat(&self, j: usize) -> f64 {
        self.child_count(j) as f64 / self.nk1 as f64
    }

    /// Integer test of `sum_j alpha_j > 1`, i.e. some intersection exists.
    pub fn alpha_sum_exceeds_one(&self) -> bool {
        let sum: u64 = (0..self.fanout()).map(|j| self.child_count(j)).sum();
        sum > self.nk1
    }

    pub fn materialized(&self) -> &BTreeMap<SubsetMask, u64> {
        &self.counts
    }

    /// Debug dump: `stats <node> n=.. nk1=..` then one `I {a,b} = c` line per
    /// materialized subset, ordered by size then member ids.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "stats {} n={} nk1={}", self.node, self.n, self.nk1);
        let mut keys: Vec<SubsetMask> = self.counts.keys().copied().collect();
        keys.sort_by_key(|m| {
            (
                m.count_ones(),
                mask_members(*m)
                    .iter()
                    .map(|&j| self.children[j].clone())
                    .collect::<Vec<_>>(),
            )
        });
        for m in keys {
            let names: Vec<&str> = mask_members(m)
                .iter()
                .map(|&j| self.children[j].as_str())
                .collect();
            let _ = writeln!(out, "I {{{}}} = {}", names.join(","), self.counts[&m]);
        }
        out
    }
}

/// Per-source and pooled statistics for a node observed from several sources.
#[derive(Debug, Clone)]
pub struct MultiSourceNodeStats {
    pub node: String,
    pub children: Vec<String>,
    /// Individual observation per source, over that source's probes only.
    pub per_source: BTreeMap<String, NodeStats>,
    /// Global observation: the union of all relevant sources' probes.
    pub pooled: NodeStats,
    /// n^s per source.
    pub probes_per_source: BTreeMap<String, u64>,
    /// Sources in S(i) whose blocks carried no observation of the node.
    pub empty_sources: Vec<String>,
}

impl MultiSourceNodeStats {
    /// n_i(s, 1).
    pub fn reach_count(&self, source: &str) -> u64 {
        self.per_source.get(source).map_or(0, |s| s.nk1)
    }

    /// Per-source empirical rate n_i(s,1)/n^s.
    pub fn gamma_hat_for(&self, source: &str) -> Option<f64> {
        let stats = self.per_source.get(source)?;
        Some(stats.nk1 as f64 / self.probes_per_source[source] as f64)
    }

    /// Pooled pass-rate ratio for child `j` over all sources:
    /// `sum_s n_j(s,1) / sum_s n_i(s,1)`.
    pub fn pooled_alpha_hat(&self, j: usize) -> f64 {
        self.pooled.alpha_hat(j)
    }
}

/// Computes per-source and pooled statistics for `node` over every source
/// that can reach it and has probes in the matrix.
pub fn pooled_stats(
    obs: &ObservationMatrix,
    topo: &GeneralTopology,
    node: &str,
    cap: usize,
) -> Result<MultiSourceNodeStats, StatsError> {
    let ix = topo.node_index(node)?;
    if topo.children(ix).is_empty() {
        return Err(StatsError::LeafNode(node.to_string()));
    }
    let mut per_source = BTreeMap::new();
    let mut probes_per_source = BTreeMap::new();
    let mut empty_sources = Vec::new();
    let mut pooled_rows: Vec<(usize, usize)> = Vec::new(); // (start, len) blocks
    let mut any = false;
    for &spos in topo.sources_reaching(ix) {
        let sname = topo.node_name(topo.sources()[spos]).to_string();
        let Some(block) = obs.block_for(&sname) else {
            continue;
        };
        any = true;
        let ind = ReachIndicators::for_node_rows(obs, topo, ix, block.start, block.len)?;
        let stats = NodeStats::from_indicators(&ind, cap)?;
        if stats.nk1 == 0 {
            empty_sources.push(sname.clone());
        }
        pooled_rows.push((block.start, block.len));
        probes_per_source.insert(sname.clone(), block.len as u64);
        per_source.insert(sname, stats);
    }
    if !any {
        return Err(StatsError::NoSource(node.to_string()));
    }
    // Pooled sets over the concatenation of the relevant blocks.
    let pooled_n: usize = pooled_rows.iter().map(|&(_, l)| l).sum();
    let children_ix = topo.children(ix);
    let mut sets = vec![ProbeSet::new(pooled_n); children_ix.len()];
    let mut offset = 0usize;
    for &(start, len) in &pooled_rows {
        for (j, &(child, _)) in children_ix.iter().enumerate() {
            for &col in topo.receiver_cols_below(child) {
                let col_set = obs.column(col);
                for i in 0..len {
                    if col_set.contains(start + i) {
                        sets[j].insert(offset + i);
                    }
                }
            }
        }
        offset += len;
    }
    let children: Vec<String> = children_ix
        .iter()
        .map(|&(c, _)| topo.node_name(c).to_string())
        .collect();
    let pooled = NodeStats::from_sets(node, children.clone(), sets, pooled_n as u64, cap)?;
    Ok(MultiSourceNodeStats {
        node: node.to_string(),
        children,
        per_source,
        pooled,
        probes_per_source,
        empty_sources,
    })
}
