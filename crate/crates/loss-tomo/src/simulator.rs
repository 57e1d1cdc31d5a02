//! Seeded Bernoulli probe simulation.
//!
//! Each probe crosses each link independently with the link's pass rate; a
//! receiver observes the probe iff every link on some source-to-receiver path
//! passed it. Loss draws come from one ChaCha8 stream per (source, link)
//! pair, so adding a link or reordering the traversal never perturbs the
//! draws of any other link, and parallel simulation is bit-identical to
//! sequential.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bitset::ProbeSet;
use crate::topology::{GeneralTopology, LinkParams, MulticastTree, TopologyError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("source {0} is not a source of the topology")]
    UnknownSource(String),
    #[error("probe count must be >= 1")]
    ZeroProbes,
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("observation parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// One contiguous block of probes dispatched from a single source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceBlock {
    pub source: String,
    pub start: usize,
    pub len: usize,
}

/// Per-probe, per-receiver reception outcomes.
///
/// Rows are probes in dispatch order (ids strictly increasing, one contiguous
/// block per source, blocks ordered by source id); columns are the
/// topology's receivers in sorted id order.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMatrix {
    receivers: Vec<String>,
    blocks: Vec<SourceBlock>,
    /// Column-major probe sets: `cols[c]` holds the probes received at
    /// receiver `c`.
    cols: Vec<ProbeSet>,
    n_probes: usize,
}

impl ObservationMatrix {
    pub fn new(receivers: Vec<String>, blocks: Vec<SourceBlock>, cols: Vec<ProbeSet>) -> Self {
        let n_probes = blocks.iter().map(|b| b.len).sum();
        debug_assert!(cols.iter().all(|c| c.len() == n_probes));
        ObservationMatrix {
            receivers,
            blocks,
            cols,
            n_probes,
        }
    }

    pub fn n_probes(&self) -> usize {
        self.n_probes
    }

    pub fn receivers(&self) -> &[String] {
        &self.receivers
    }

    pub fn blocks(&self) -> &[SourceBlock] {
        &self.blocks
    }

    pub fn block_for(&self, source: &str) -> Option<&SourceBlock> {
        self.blocks.iter().find(|b| b.source == source)
    }

    /// Probes observed at receiver column `c`.
    pub fn column(&self, c: usize) -> &ProbeSet {
        &self.cols[c]
    }

    pub fn cell(&self, probe: usize, col: usize) -> bool {
        self.cols[col].contains(probe)
    }

    /// Empirical reception rate of a receiver column over all probes.
    pub fn reception_rate(&self, col: usize) -> f64 {
        self.cols[col].count_ones() as f64 / self.n_probes as f64
    }

    /// Serializes as `obs <n_probes> <n_receivers>` followed by one
    /// `<probe_id> <source_id> <bitstring>` line per probe.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "obs {} {}", self.n_probes, self.receivers.len());
        for b in &self.blocks {
            for i in b.start..b.start + b.len {
                let mut bits = String::with_capacity(self.receivers.len());
                for c in 0..self.receivers.len() {
                    bits.push(if self.cols[c].contains(i) { '1' } else { '0' });
                }
                let _ = writeln!(out, "{} {} {}", i, b.source, bits);
            }
        }
        out
    }

    pub fn parse(text: &str, receivers: Vec<String>) -> Result<Self, SimError> {
        let mut lines = text.lines().enumerate();
        let (n_probes, n_recv) = loop {
            let (lineno, raw) = lines.next().ok_or(SimError::Parse {
                line: 0,
                msg: "empty observation file".into(),
            })?;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 3 || toks[0] != "obs" {
                return Err(SimError::Parse {
                    line: lineno + 1,
                    msg: format!("expected `obs <n_probes> <n_receivers>`, got {line:?}"),
                });
            }
            let n: usize = toks[1].parse().map_err(|e| SimError::Parse {
                line: lineno + 1,
                msg: format!("bad probe count: {e}"),
            })?;
            let r: usize = toks[2].parse().map_err(|e| SimError::Parse {
                line: lineno + 1,
                msg: format!("bad receiver count: {e}"),
            })?;
            break (n, r);
        };
        if n_recv != receivers.len() {
            return Err(SimError::Parse {
                line: 1,
                msg: format!(
                    "observation file has {n_recv} receivers, topology has {}",
                    receivers.len()
                ),
            });
        }
        let mut cols = vec![ProbeSet::new(n_probes); n_recv];
        let mut blocks: Vec<SourceBlock> = Vec::new();
        let mut row = 0usize;
        for (lineno, raw) in lines {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 3 {
                return Err(SimError::Parse {
                    line: lineno + 1,
                    msg: format!("expected `<probe_id> <source> <bits>`, got {line:?}"),
                });
            }
            let id: usize = toks[0].parse().map_err(|e| SimError::Parse {
                line: lineno + 1,
                msg: format!("bad probe id: {e}"),
            })?;
            if id != row {
                return Err(SimError::Parse {
                    line: lineno + 1,
                    msg: format!("probe ids must be 0..n in order, expected {row} got {id}"),
                });
            }
            let source = toks[1];
            let bits = toks[2];
            if bits.len() != n_recv {
                return Err(SimError::Parse {
                    line: lineno + 1,
                    msg: format!("bitstring has {} bits, expected {n_recv}", bits.len()),
                });
            }
            for (c, ch) in bits.chars().enumerate() {
                match ch {
                    '1' => cols[c].insert(row),
                    '0' => {}
                    other => {
                        return Err(SimError::Parse {
                            line: lineno + 1,
                            msg: format!("bitstring must be 0/1, got {other:?}"),
                        })
                    }
                }
            }
            match blocks.last_mut() {
                Some(b) if b.source == source => b.len += 1,
                _ => blocks.push(SourceBlock {
                    source: source.to_string(),
                    start: row,
                    len: 1,
                }),
            }
            row += 1;
        }
        if row != n_probes {
            return Err(SimError::Parse {
                line: 0,
                msg: format!("expected {n_probes} probe lines, found {row}"),
            });
        }
        Ok(ObservationMatrix::new(receivers, blocks, cols))
    }
}

/// Seeds one ChaCha8 stream per (source, link); probe `i` of a block consumes
/// draw `i` of each stream regardless of traversal order.
fn link_rng(seed: u64, source_ix: usize, link_ix: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(((source_ix as u64) << 32) | link_ix as u64);
    rng
}

/// Simulates `per_source[s]` probes from each source over the topology.
///
/// Deterministic for a given seed: identical inputs produce bit-identical
/// matrices.
pub fn simulate_general(
    topo: &GeneralTopology,
    params: &LinkParams,
    per_source: &BTreeMap<String, usize>,
    seed: u64,
) -> Result<ObservationMatrix, SimError> {
    let receivers: Vec<String> = topo
        .receiver_names()
        .iter()
        .map(|s| s.to_string())
        .collect();
    let source_names: Vec<&str> = topo.sources().iter().map(|&s| topo.node_name(s)).collect();
    for name in per_source.keys() {
        if !source_names.contains(&name.as_str()) {
            return Err(SimError::UnknownSource(name.clone()));
        }
    }
    let n_total: usize = per_source.values().sum();
    if per_source.values().any(|&n| n == 0) || per_source.is_empty() {
        return Err(SimError::ZeroProbes);
    }
    let mut cols = vec![ProbeSet::new(n_total); receivers.len()];
    let mut blocks = Vec::new();
    let mut start = 0usize;
    // BTreeMap iteration gives blocks ordered by source id.
    for (sname, &n) in per_source {
        let six = topo.node_index(sname)?;
        let source_pos = topo.sources().iter().position(|&s| s == six).unwrap();
        // reach[v]: probes of this block that arrive at node v.
        let mut reach: Vec<Option<ProbeSet>> = vec![None; topo.node_count()];
        let mut all = ProbeSet::new(n);
        for i in 0..n {
            all.insert(i);
        }
        reach[six] = Some(all);
        for &v in topo.topo_order() {
            let Some(rv) = reach[v].clone() else { continue };
            for &(child, link_ix) in topo.children(v) {
                let link = &topo.links()[link_ix];
                let rate = params
                    .rate(&link.id)
                    .ok_or_else(|| TopologyError::MissingPassRate(link.id.clone()))?;
                let mut rng = link_rng(seed, source_pos, link_ix);
                let mut passed = ProbeSet::new(n);
                for i in 0..n {
                    let u: f64 = rng.gen();
                    if u < rate {
                        passed.insert(i);
                    }
                }
                // crossed = arrived at parent AND link passed
                let mut crossed = ProbeSet::new(n);
                for i in rv.iter() {
                    if passed.contains(i) {
                        crossed.insert(i);
                    }
                }
                match &mut reach[child] {
                    Some(existing) => existing.union_assign(&crossed),
                    slot => *slot = Some(crossed),
                }
            }
        }
        for (c, &recv_node) in topo.receivers().iter().enumerate() {
            if let Some(r) = &reach[recv_node] {
                for i in r.iter() {
                    cols[c].insert(start + i);
                }
            }
        }
        blocks.push(SourceBlock {
            source: sname.clone(),
            start,
            len: n,
        });
        start += n;
    }
    Ok(ObservationMatrix::new(receivers, blocks, cols))
}

/// Simulates `n` probes multicast from the tree's root.
pub fn simulate_tree(
    tree: &MulticastTree,
    params: &LinkParams,
    n: usize,
    seed: u64,
) -> Result<ObservationMatrix, SimError> {
    let root = tree.topology().node_name(tree.root()).to_string();
    let mut per_source = BTreeMap::new();
    per_source.insert(root, n);
    simulate_general(tree.topology(), params, &per_source, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::MulticastTree;

    fn two_leaf_tree(rate: f64) -> (MulticastTree, LinkParams) {
        let links = vec![
            (
                "b".to_string(),
                "root".to_string(),
                "b".to_string(),
                Some(rate),
            ),
            (
                "l1".to_string(),
                "b".to_string(),
                "l1".to_string(),
                Some(rate),
            ),
            (
                "l2".to_string(),
                "b".to_string(),
                "l2".to_string(),
                Some(rate),
            ),
        ];
        let tree = MulticastTree::from_records(&links, &[]).unwrap();
        let params = LinkParams::from_topology(tree.topology()).unwrap();
        (tree, params)
    }

    #[test]
    fn lossless_network_all_ones() {
        let (tree, params) = two_leaf_tree(1.0);
        let obs = simulate_tree(&tree, &params, 10, 7).unwrap();
        for c in 0..2 {
            assert_eq!(obs.column(c).count_ones(), 10);
        }
    }

    #[test]
    fn near_total_loss_mostly_zero() {
        let (tree, params) = two_leaf_tree(0.0001);
        let obs = simulate_tree(&tree, &params, 10, 7).unwrap();
        let total: u64 = (0..2).map(|c| obs.column(c).count_ones()).sum();
        assert_eq!(total, 0);
    }

    #[test]
    fn reception_rate_matches_path_product() {
        let (tree, params) = two_leaf_tree(0.8);
        let obs = simulate_tree(&tree, &params, 100_000, 42).unwrap();
        for c in 0..2 {
            let rate = obs.reception_rate(c);
            assert!((rate - 0.64).abs() < 0.01, "rate {rate}");
        }
    }

    #[test]
    fn seed_determinism() {
        let (tree, params) = two_leaf_tree(0.7);
        let a = simulate_tree(&tree, &params, 5000, 9).unwrap();
        let b = simulate_tree(&tree, &params, 5000, 9).unwrap();
        assert_eq!(a.serialize(), b.serialize());
        let c = simulate_tree(&tree, &params, 5000, 10).unwrap();
        assert_ne!(a.serialize(), c.serialize());
    }

    #[test]
    fn physical_consistency_no_reception_past_lost_link() {
        // If a probe is lost on the branch link, both leaves miss it.
        let links = vec![
            (
                "b".to_string(),
                "root".to_string(),
                "b".to_string(),
                Some(0.3),
            ),
            (
                "l1".to_string(),
                "b".to_string(),
                "l1".to_string(),
                Some(1.0),
            ),
            (
                "l2".to_string(),
                "b".to_string(),
                "l2".to_string(),
                Some(1.0),
            ),
        ];
        let tree = MulticastTree::from_records(&links, &[]).unwrap();
        let params = LinkParams::from_topology(tree.topology()).unwrap();
        let obs = simulate_tree(&tree, &params, 2000, 3).unwrap();
        // With leaf links lossless, the two columns must be identical.
        assert_eq!(obs.column(0), obs.column(1));
    }

    #[test]
    fn single_source_general_is_bitwise_the_tree_simulation() {
        let (tree, params) = two_leaf_tree(0.8);
        let by_tree = simulate_tree(&tree, &params, 3000, 8).unwrap();
        let mut per = BTreeMap::new();
        per.insert("root".to_string(), 3000);
        let by_general = simulate_general(tree.topology(), &params, &per, 8).unwrap();
        assert_eq!(by_tree.serialize(), by_general.serialize());
    }

    #[test]
    fn round_trip_serialization() {
        let (tree, params) = two_leaf_tree(0.6);
        let obs = simulate_tree(&tree, &params, 257, 11).unwrap();
        let text = obs.serialize();
        let back = ObservationMatrix::parse(&text, obs.receivers().to_vec()).unwrap();
        assert_eq!(obs, back);
        assert_eq!(text, back.serialize());
    }

    #[test]
    fn disjoint_sources_are_block_diagonal() {
        // s1 -> a -> {r1, r2}, s2 -> b -> {r3, r4}
        let links = vec![
            (
                "e1".to_string(),
                "s1".to_string(),
                "a".to_string(),
                Some(0.9),
            ),
            (
                "e2".to_string(),
                "a".to_string(),
                "r1".to_string(),
                Some(0.9),
            ),
            (
                "e3".to_string(),
                "a".to_string(),
                "r2".to_string(),
                Some(0.9),
            ),
            (
                "e4".to_string(),
                "s2".to_string(),
                "b".to_string(),
                Some(0.9),
            ),
            (
                "e5".to_string(),
                "b".to_string(),
                "r3".to_string(),
                Some(0.9),
            ),
            (
                "e6".to_string(),
                "b".to_string(),
                "r4".to_string(),
                Some(0.9),
            ),
        ];
        let topo = GeneralTopology::from_records(&links, &["s1".into(), "s2".into()]).unwrap();
        let params = LinkParams::from_topology(&topo).unwrap();
        let mut per = BTreeMap::new();
        per.insert("s1".to_string(), 500);
        per.insert("s2".to_string(), 500);
        let obs = simulate_general(&topo, &params, &per, 5).unwrap();
        let b1 = obs.block_for("s1").unwrap().clone();
        let b2 = obs.block_for("s2").unwrap().clone();
        // r1, r2 are columns 0,1; r3, r4 columns 2,3 (sorted ids).
        for i in b1.start..b1.start + b1.len {
            assert!(!obs.cell(i, 2) && !obs.cell(i, 3));
        }
        for i in b2.start..b2.start + b2.len {
            assert!(!obs.cell(i, 0) && !obs.cell(i, 1));
        }
    }

    #[test]
    fn shared_subtree_reach_rate_per_source() {
        // s1 -> u1 -> j, s2 -> u2 -> j, j -> {r1, r2}; all rates 0.9.
        let links = vec![
            (
                "e1".to_string(),
                "s1".to_string(),
                "u1".to_string(),
                Some(0.9),
            ),
            (
                "e2".to_string(),
                "s2".to_string(),
                "u2".to_string(),
                Some(0.9),
            ),
            (
                "e3".to_string(),
                "u1".to_string(),
                "j".to_string(),
                Some(0.9),
            ),
            (
                "e4".to_string(),
                "u2".to_string(),
                "j".to_string(),
                Some(0.9),
            ),
            (
                "e5".to_string(),
                "j".to_string(),
                "r1".to_string(),
                Some(0.9),
            ),
            (
                "e6".to_string(),
                "j".to_string(),
                "r2".to_string(),
                Some(0.9),
            ),
        ];
        let topo = GeneralTopology::from_records(&links, &["s1".into(), "s2".into()]).unwrap();
        let params = LinkParams::from_topology(&topo).unwrap();
        let mut per = BTreeMap::new();
        per.insert("s1".to_string(), 100_000);
        per.insert("s2".to_string(), 100_000);
        let obs = simulate_general(&topo, &params, &per, 13).unwrap();
        // Path product s -> r is 0.9^3 per source.
        let expect = 0.9f64.powi(3);
        for b in obs.blocks() {
            for c in 0..2 {
                let mut hits = 0u64;
                for i in b.start..b.start + b.len {
                    if obs.cell(i, c) {
                        hits += 1;
                    }
                }
                let rate = hits as f64 / b.len as f64;
                assert!((rate - expect).abs() < 0.01, "rate {rate} expect {expect}");
            }
        }
    }
}
