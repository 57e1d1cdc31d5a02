// Each integration target compiles this module separately and uses a
// different subset of it.
#![allow(dead_code)]

//! Shared instance generators for the integration suites.
//!
//! Two stochastic processes cover the data classes. Independent per-child
//! visibility yields perfect observations (and exclusive ones when the
//! visibilities are tiny); disjoint interval segments with chain-overlapping
//! windows inside each segment yield partitioned and chained observations
//! whose cross terms are structurally zero.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use loss_tomo::statistics::{NodeStats, SubsetMask};
use loss_tomo::topology::{LinkParams, MulticastTree};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn child_names(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("c{j}")).collect()
}

/// Largest-remainder rounding of pattern probabilities to integer counts
/// summing exactly to `n`.
pub fn round_counts(probs: &[(SubsetMask, f64)], n: u64) -> BTreeMap<SubsetMask, u64> {
    let mut floors: Vec<(SubsetMask, u64, f64)> = probs
        .iter()
        .map(|&(m, p)| {
            let exact = p * n as f64;
            let fl = exact.floor() as u64;
            (m, fl, exact - fl as f64)
        })
        .collect();
    let assigned: u64 = floors.iter().map(|&(_, f, _)| f).sum();
    let mut remainder = n - assigned;
    floors.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
    let mut out = BTreeMap::new();
    for (m, f, _) in floors {
        let extra = if remainder > 0 {
            remainder -= 1;
            1
        } else {
            0
        };
        if f + extra > 0 {
            out.insert(m, f + extra);
        }
    }
    out
}

/// NodeStats whose counts follow the independent Bernoulli model exactly
/// (up to largest-remainder rounding at scale `n`): pass rate `a`, per-child
/// conditional visibility `c[j]`.
pub fn model_consistent_stats(a: f64, c: &[f64], n: u64) -> NodeStats {
    let d = c.len();
    let mut probs = Vec::new();
    for mask in 0u64..(1 << d) {
        let mut p = a;
        for (j, &cj) in c.iter().enumerate() {
            if mask >> j & 1 == 1 {
                p *= cj;
            } else {
                p *= 1.0 - cj;
            }
        }
        if mask == 0 {
            p += 1.0 - a;
        }
        probs.push((mask, p));
    }
    let counts = round_counts(&probs, n);
    NodeStats::from_pattern_counts("k", child_names(d), counts, n, 16).unwrap()
}

/// Simulates one node's observation with independent per-child visibility.
pub fn gen_independent(rng: &mut ChaCha8Rng, d: usize, c_lo: f64, c_hi: f64, n: u64) -> NodeStats {
    let a: f64 = rng.gen_range(0.3..0.95);
    let c: Vec<f64> = (0..d).map(|_| rng.gen_range(c_lo..c_hi)).collect();
    let mut patterns: BTreeMap<SubsetMask, u64> = BTreeMap::new();
    for _ in 0..n {
        let mut mask = 0u64;
        if rng.gen_bool(a) {
            for (j, &cj) in c.iter().enumerate() {
                if rng.gen_bool(cj) {
                    mask |= 1 << j;
                }
            }
        }
        *patterns.entry(mask).or_insert(0) += 1;
    }
    NodeStats::from_pattern_counts("k", child_names(d), patterns, n, 16).unwrap()
}

/// Simulates one node's observation where the children split into disjoint
/// interval segments; inside a segment consecutive children overlap (chain
/// structure) and children of a 2-segment share the whole window.
pub fn gen_interval(rng: &mut ChaCha8Rng, segments: &[usize], n: u64) -> NodeStats {
    let d: usize = segments.iter().sum();
    let a: f64 = rng.gen_range(0.4..0.95);
    let seg_count = segments.len();
    let seg_width = 1.0 / seg_count as f64;
    let mut windows: Vec<(f64, f64)> = Vec::new();
    for (s, &size) in segments.iter().enumerate() {
        let lo = s as f64 * seg_width;
        let usable = seg_width * 0.9;
        if size == 1 {
            windows.push((lo, lo + usable));
        } else {
            // Chain-overlapping windows: child i covers slot i and a margin
            // into slot i+1, so only consecutive children intersect.
            let slot = usable / size as f64;
            for i in 0..size {
                let margin = rng.gen_range(0.15..0.45) * slot;
                let w_lo = lo + i as f64 * slot;
                let w_hi = (w_lo + slot + margin).min(lo + usable);
                windows.push((w_lo, w_hi));
            }
        }
    }
    let accept: Vec<f64> = (0..d).map(|_| rng.gen_range(0.6..1.0)).collect();
    let mut patterns: BTreeMap<SubsetMask, u64> = BTreeMap::new();
    for _ in 0..n {
        let mut mask = 0u64;
        if rng.gen_bool(a) {
            let u: f64 = rng.gen();
            for (j, &(w_lo, w_hi)) in windows.iter().enumerate() {
                if u >= w_lo && u < w_hi && rng.gen_bool(accept[j]) {
                    mask |= 1 << j;
                }
            }
        }
        *patterns.entry(mask).or_insert(0) += 1;
    }
    NodeStats::from_pattern_counts("k", child_names(d), patterns, n, 16).unwrap()
}

/// A random two-level tree: root -> b, b -> f internal nodes, each with 2..=3
/// leaves (or itself a leaf). Rates uniform in `[rate_lo, rate_hi]`.
pub fn random_tree(
    rng: &mut ChaCha8Rng,
    rate_lo: f64,
    rate_hi: f64,
) -> (MulticastTree, LinkParams) {
    let mut links: Vec<(String, String, String, Option<f64>)> = Vec::new();
    let rate = |rng: &mut ChaCha8Rng| Some(rng.gen_range(rate_lo..rate_hi));
    links.push(("b".into(), "root".into(), "b".into(), rate(rng)));
    let fanout = rng.gen_range(2..=4);
    for i in 0..fanout {
        let name = format!("m{i}");
        links.push((name.clone(), "b".into(), name.clone(), rate(rng)));
        if rng.gen_bool(0.6) {
            let leaves = rng.gen_range(2..=3);
            for l in 0..leaves {
                let leaf = format!("m{i}l{l}");
                links.push((leaf.clone(), name.clone(), leaf.clone(), rate(rng)));
            }
        }
    }
    let tree = MulticastTree::from_records(&links, &[]).unwrap();
    let params = LinkParams::from_topology(tree.topology()).unwrap();
    (tree, params)
}

/// The seven-link binary tree used by the consistency checks:
/// root -> v1 -> {v2, v3}, v2 -> {v4, v5}, v3 -> {v6, v7}.
pub fn seven_link_binary(rates: &[f64; 7]) -> (MulticastTree, LinkParams) {
    let names = ["v1", "v2", "v3", "v4", "v5", "v6", "v7"];
    let parents = ["root", "v1", "v1", "v2", "v2", "v3", "v3"];
    let links: Vec<(String, String, String, Option<f64>)> = names
        .iter()
        .zip(parents.iter())
        .zip(rates.iter())
        .map(|((n, p), r)| (n.to_string(), p.to_string(), n.to_string(), Some(*r)))
        .collect();
    let tree = MulticastTree::from_records(&links, &[]).unwrap();
    let params = LinkParams::from_topology(tree.topology()).unwrap();
    (tree, params)
}
