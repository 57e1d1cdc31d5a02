//! Brute-force reference implementations used to validate the estimators and
//! the statistics engine on small instances: refined grid maximization of the
//! per-class log-likelihoods, and exhaustive subset counting by per-probe
//! scanning.
//!
//! Nothing here sits on a production estimation path; the `oracle` CLI
//! subcommand exposes the likelihood profiles for manual inspection.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::classifier::{ComponentKind, DataClass, MissingTerms, PartitionStructure};
use crate::estimators::balanced_split;
use crate::simulator::ObservationMatrix;
use crate::statistics::{mask_members, NodeStats, StatsError, SubsetMask};
use crate::topology::MulticastTree;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("log-likelihood is -inf everywhere on the grid: no information")]
    NoInformation,
    #[error("grid resolution must be at least 1000, got {0}")]
    ResolutionTooCoarse(usize),
    #[error("fan-out {0} exceeds the exhaustive-count cap of 12")]
    FanOutOverCap(usize),
    #[error("invalid beta {0} outside [0, 1]")]
    InvalidBeta(f64),
    #[error("no positive-count component to build a likelihood from")]
    Degenerate,
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Grid resolution and refinement schedule for `grid_mle`.
#[derive(Debug, Clone, Copy)]
pub struct GridSpec {
    pub points: usize,
    pub rounds: usize,
}

impl Default for GridSpec {
    /// 10^4 points, 3 refinement rounds: final spacing below 1e-9 on (0, 1).
    fn default() -> Self {
        GridSpec {
            points: 10_000,
            rounds: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    Lower,
    Upper,
}

/// Result of a grid maximization.
#[derive(Debug, Clone, Copy)]
pub struct GridMax {
    pub argmax: f64,
    pub value: f64,
    /// Final grid spacing; the true maximizer of a unimodal function lies
    /// within one spacing of `argmax`.
    pub spacing: f64,
    /// Set when the maximum sits on an end of the search interval, which
    /// means the reported argmax is a boundary report rather than an interior
    /// maximizer.
    pub boundary: Option<Boundary>,
}

/// A log-likelihood as a function of the path pass rate, with its domain.
pub struct LogLik {
    pub lo: f64,
    pub hi: f64,
    f: Box<dyn Fn(f64) -> f64>,
}

impl LogLik {
    pub fn new(lo: f64, hi: f64, f: impl Fn(f64) -> f64 + 'static) -> Self {
        LogLik {
            lo,
            hi,
            f: Box::new(f),
        }
    }

    pub fn eval(&self, a: f64) -> f64 {
        (self.f)(a)
    }
}

/// Maximizes `loglik` over its domain by evaluating `spec.points` equally
/// spaced points, then shrinking the window around the incumbent for
/// `spec.rounds` further rounds.
pub fn grid_mle(loglik: &LogLik, spec: GridSpec) -> Result<GridMax, OracleError> {
    if spec.points < 1000 {
        return Err(OracleError::ResolutionTooCoarse(spec.points));
    }
    let (glo, ghi) = (loglik.lo, loglik.hi);
    let mut lo = glo;
    let mut hi = ghi;
    let mut best = (f64::NEG_INFINITY, f64::NAN);
    let mut spacing = (hi - lo) / (spec.points - 1) as f64;
    for _ in 0..=spec.rounds {
        spacing = (hi - lo) / (spec.points - 1) as f64;
        let mut round_best = (f64::NEG_INFINITY, f64::NAN);
        for i in 0..spec.points {
            let a = lo + i as f64 * spacing;
            let v = loglik.eval(a);
            if v.is_finite() && v > round_best.0 {
                round_best = (v, a);
            }
        }
        if !round_best.1.is_finite() {
            return Err(OracleError::NoInformation);
        }
        best = round_best;
        lo = (best.1 - spacing).max(glo);
        hi = (best.1 + spacing).min(ghi);
    }
    let boundary = if best.1 - glo <= spacing {
        Some(Boundary::Lower)
    } else if ghi - best.1 <= spacing {
        Some(Boundary::Upper)
    } else {
        None
    };
    Ok(GridMax {
        argmax: best.1,
        value: best.0,
        spacing,
        boundary,
    })
}

/// Antiderivative of the likelihood-equation score of one component:
/// the function of `A` whose stationary point is exactly the component's
/// corrected-equation root. `excluded` holds the subsets (component-local
/// masks over all children) whose expansion terms the data lacks.
fn component_score_integral(
    stats: &NodeStats,
    component: SubsetMask,
    excluded: &[SubsetMask],
) -> impl Fn(f64) -> f64 {
    let members = mask_members(component);
    let gammas: Vec<f64> = members.iter().map(|&j| stats.child_gamma_hat(j)).collect();
    let comp_gamma = stats.union_count(component) as f64 / stats.n as f64;
    let n = stats.n as f64;
    // Collect every retained expansion subset of size >= 2 as
    // (sign, product of member gammas, size).
    let mut terms: Vec<(f64, f64, i32)> = Vec::new();
    let d = members.len();
    for bits in 1u64..(1 << d) {
        let size = bits.count_ones() as usize;
        if size < 2 {
            continue;
        }
        let mask: SubsetMask = (0..d)
            .filter(|&i| bits >> i & 1 == 1)
            .map(|i| 1u64 << members[i])
            .sum();
        if excluded.contains(&mask) {
            continue;
        }
        let prod: f64 = (0..d)
            .filter(|&i| bits >> i & 1 == 1)
            .map(|i| gammas[i])
            .product();
        let sign = if size.is_multiple_of(2) { 1.0 } else { -1.0 };
        terms.push((sign, prod, size as i32));
    }
    let gamma_sum: f64 = gammas.iter().sum();
    move |a: f64| {
        let mut acc = -(gamma_sum - comp_gamma) * a.ln();
        for &(sign, prod, size) in &terms {
            acc -= sign * prod * a.powi(1 - size) / (size - 1) as f64;
        }
        n * acc
    }
}

/// Builds the exact log-likelihood of the path pass rate for a classified
/// observation.
///
/// For the perfect class this is the observed-pattern multinomial with the
/// per-subtree conditional rates profiled out at `gamma_j / A`; its interior
/// maximizer coincides with the polynomial-equation root. For the other
/// classes it is the antiderivative of the class's likelihood-equation score,
/// so the maximizer is the class equation's root by construction; the
/// partitioned form reduces each internally perfect component to two groups
/// exactly as the pooled closed form does.
pub fn exact_loglik(
    class: DataClass,
    stats: &NodeStats,
    parts: &PartitionStructure,
    me: &MissingTerms,
) -> Result<LogLik, OracleError> {
    match class {
        DataClass::Perfect => {
            let d = stats.fanout();
            let n = stats.n as f64;
            let nk = stats.nk1 as f64;
            let gammas: Vec<f64> = (0..d).map(|j| stats.child_gamma_hat(j)).collect();
            let counts: Vec<f64> = (0..d).map(|j| stats.child_count(j) as f64).collect();
            let lo = gammas.iter().cloned().fold(0.0f64, f64::max);
            if lo <= 0.0 {
                return Err(OracleError::Degenerate);
            }
            let f = move |a: f64| {
                if a <= lo {
                    return f64::NEG_INFINITY;
                }
                let mut lk = nk * a.ln();
                let mut prod = 1.0;
                for j in 0..gammas.len() {
                    let g = gammas[j] / a;
                    lk += counts[j] * g.ln() + (nk - counts[j]) * (1.0 - g).ln();
                    prod *= 1.0 - g;
                }
                let empty = 1.0 - a + a * prod;
                if empty <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                lk + (n - nk) * empty.ln()
            };
            Ok(LogLik::new(lo * (1.0 + 1e-12), 1.0, f))
        }
        DataClass::ChainedOnly => {
            let full = stats.full_mask();
            let excluded: Vec<SubsetMask> = me.subsets.iter().copied().collect();
            let f = component_score_integral(stats, full, &excluded);
            let lo = (stats.gamma_hat() * (1.0 - 1e-12)).max(1e-9);
            Ok(LogLik::new(lo, 1.0, f))
        }
        DataClass::PartitionOnly => {
            // Two-group reduction per multi-member component, exactly as the
            // pooled closed form.
            let n = stats.n as f64;
            let mut terms = Vec::new();
            for comp in parts.multi_components() {
                let (g1, g2) = balanced_split(stats, comp.mask);
                let c1 = stats.union_count(g1) as f64;
                let c2 = stats.union_count(g2) as f64;
                let o = stats.joint_union_count(g1, g2) as f64;
                terms.push((o, c1 * c2 / n));
            }
            if terms.is_empty() {
                return Err(OracleError::Degenerate);
            }
            let f = move |a: f64| terms.iter().map(|&(o, prod)| -o * a.ln() - prod / a).sum();
            Ok(LogLik::new(1e-9, 1.0, f))
        }
        DataClass::ChainedPartition => {
            let mut fs = Vec::new();
            for comp in parts.multi_components() {
                let excluded = match comp.kind {
                    ComponentKind::Chained => me.within(comp.mask),
                    _ => Vec::new(),
                };
                fs.push(component_score_integral(stats, comp.mask, &excluded));
            }
            if fs.is_empty() {
                return Err(OracleError::Degenerate);
            }
            let f = move |a: f64| fs.iter().map(|f| f(a)).sum();
            Ok(LogLik::new(1e-9, 1.0, f))
        }
        DataClass::CompleteExclusion => Err(OracleError::Degenerate),
    }
}

/// Per-component binomial log-likelihood in the displayed
/// `n(1) log A + n(0) log(1 - A beta)` form, with each component's beta held
/// constant at its self-consistent empirical value. Exposed for comparison
/// against the pooled closed form, whose derivation additionally approximates
/// the derivative denominator.
pub fn partition_binomial_loglik(
    stats: &NodeStats,
    parts: &PartitionStructure,
) -> Result<LogLik, OracleError> {
    let n = stats.n as f64;
    let mut terms = Vec::new();
    let mut hi = 1.0f64;
    for comp in parts.multi_components() {
        let (g1, g2) = balanced_split(stats, comp.mask);
        let c1 = stats.union_count(g1) as f64;
        let c2 = stats.union_count(g2) as f64;
        let o = stats.joint_union_count(g1, g2) as f64;
        let nk = stats.union_count(comp.mask) as f64;
        // beta = gamma_kj / A_j* with the component-local two-group estimate.
        let beta = nk * o / (c1 * c2);
        if !(0.0..=1.0).contains(&beta) {
            return Err(OracleError::InvalidBeta(beta));
        }
        hi = hi.min(1.0 / beta * (1.0 - 1e-12));
        terms.push((nk, n - nk, beta));
    }
    if terms.is_empty() {
        return Err(OracleError::Degenerate);
    }
    let f = move |a: f64| {
        terms
            .iter()
            .map(|&(n1, n0, beta)| n1 * a.ln() + n0 * (1.0 - a * beta).ln())
            .sum()
    };
    Ok(LogLik::new(1e-9, hi, f))
}

/// All `2^|d_k| - 1` intersection counts of a node by direct per-probe
/// pattern scanning and a superset-sum transform; independent of the
/// AND/popcount path in the statistics module.
pub fn exhaustive_subset_counts(
    obs: &ObservationMatrix,
    tree: &MulticastTree,
    node: &str,
) -> Result<NodeStats, OracleError> {
    let topo = tree.topology();
    let ix = topo.node_index(node).map_err(StatsError::from)?;
    let children = topo.children(ix);
    let d = children.len();
    if d == 0 {
        return Err(OracleError::Stats(StatsError::LeafNode(node.to_string())));
    }
    if d > 12 {
        return Err(OracleError::FanOutOverCap(d));
    }
    let n = obs.n_probes();
    let mut pattern_counts = vec![0u64; 1 << d];
    let mut sets = vec![crate::bitset::ProbeSet::new(n); d];
    for probe in 0..n {
        let mut pat = 0usize;
        for (j, &(child, _)) in children.iter().enumerate() {
            if topo
                .receiver_cols_below(child)
                .iter()
                .any(|&c| obs.cell(probe, c))
            {
                pat |= 1 << j;
                sets[j].insert(probe);
            }
        }
        pattern_counts[pat] += 1;
    }
    // Superset-sum: I(x) = sum of pattern counts over patterns containing x.
    let mut sup = pattern_counts.clone();
    #[allow(clippy::needless_range_loop)]
    for bit in 0..d {
        for m in 0..(1usize << d) {
            if m & (1 << bit) == 0 {
                sup[m] += sup[m | 1 << bit];
            }
        }
    }
    let counts: BTreeMap<SubsetMask, u64> = sup
        .iter()
        .enumerate()
        .skip(1)
        .map(|(m, &c)| (m as SubsetMask, c))
        .collect();
    let nk1 = n as u64 - pattern_counts[0];
    let names = children
        .iter()
        .map(|&(c, _)| topo.node_name(c).to_string())
        .collect();
    Ok(NodeStats::from_parts(
        node.to_string(),
        names,
        sets,
        n as u64,
        nk1,
        counts,
        12,
    ))
}

/// The alternating inclusion-exclusion sum over all non-empty subsets:
/// `sum_x (-1)^{|x|+1} I(x)`. Equals the union count exactly when the counts
/// come from a common measure.
pub fn inclusion_exclusion_union(counts: &BTreeMap<SubsetMask, u64>, full: SubsetMask) -> i128 {
    let mut acc: i128 = 0;
    for (&m, &c) in counts {
        if m != 0 && m & full == m {
            if m.count_ones() % 2 == 1 {
                acc += c as i128;
            } else {
                acc -= c as i128;
            }
        }
    }
    acc
}

/// Connected components by union-find, as masks over `0..d`. An independent
/// check of the classifier's BFS-derived partition structure.
pub fn union_find_components(d: usize, edges: &[(usize, usize)]) -> Vec<SubsetMask> {
    let mut parent: Vec<usize> = (0..d).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for &(a, b) in edges {
        let ra = find(&mut parent, a);
        let rb = find(&mut parent, b);
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut comps: BTreeMap<usize, SubsetMask> = BTreeMap::new();
    for v in 0..d {
        let r = find(&mut parent, v);
        *comps.entry(r).or_insert(0) |= 1 << v;
    }
    let mut out: Vec<SubsetMask> = comps.into_values().collect();
    out.sort_by_key(|m| m.trailing_zeros());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::simulate_tree;
    use crate::statistics::{NodeStats, ReachIndicators};
    use crate::topology::{LinkParams, MulticastTree};

    #[test]
    fn grid_finds_quadratic_peak() {
        let ll = LogLik::new(0.0, 1.0, |a| -(a - 0.7) * (a - 0.7));
        let m = grid_mle(&ll, GridSpec::default()).unwrap();
        assert!(m.boundary.is_none());
        assert!((m.argmax - 0.7).abs() <= m.spacing);
        assert!(m.spacing < 1e-9);
    }

    #[test]
    fn monotone_loglik_reports_boundary() {
        let ll = LogLik::new(0.0, 1.0, |a| a);
        let m = grid_mle(&ll, GridSpec::default()).unwrap();
        assert_eq!(m.boundary, Some(Boundary::Upper));
    }

    #[test]
    fn all_neg_infinite_is_no_information() {
        let ll = LogLik::new(0.0, 1.0, |_| f64::NEG_INFINITY);
        assert!(matches!(
            grid_mle(&ll, GridSpec::default()),
            Err(OracleError::NoInformation)
        ));
    }

    #[test]
    fn coarse_resolution_rejected() {
        let ll = LogLik::new(0.0, 1.0, |a| a);
        assert!(matches!(
            grid_mle(
                &ll,
                GridSpec {
                    points: 10,
                    rounds: 1
                }
            ),
            Err(OracleError::ResolutionTooCoarse(10))
        ));
    }

    #[test]
    fn perfect_loglik_peaks_at_closed_form() {
        // n=100, n_a=50, n_b=40, n_ab=25 -> nk=65, A = 0.8
        let mut sets = vec![crate::bitset::ProbeSet::new(100); 2];
        for i in 0..50 {
            sets[0].insert(i);
        }
        for i in 25..65 {
            sets[1].insert(i);
        }
        let stats = NodeStats::from_sets("k", vec!["a".into(), "b".into()], sets, 100, 16).unwrap();
        assert_eq!(stats.nk1, 65);
        assert_eq!(stats.count(0b11), 25);
        let parts = PartitionStructure {
            components: vec![crate::classifier::Component {
                mask: 0b11,
                kind: ComponentKind::Perfect,
            }],
        };
        let ll =
            exact_loglik(DataClass::Perfect, &stats, &parts, &MissingTerms::default()).unwrap();
        let m = grid_mle(&ll, GridSpec::default()).unwrap();
        // The likelihood is flat within fp noise near its maximum, so the
        // localization is ~1e-8 even at finer grid spacing.
        assert!((m.argmax - 0.8).abs() <= 1e-6, "argmax {}", m.argmax);
    }

    #[test]
    fn exhaustive_counts_match_statistics_engine() {
        let links = vec![
            (
                "b".to_string(),
                "root".to_string(),
                "b".to_string(),
                Some(0.7),
            ),
            ("x".to_string(), "b".to_string(), "x".to_string(), Some(0.5)),
            ("y".to_string(), "b".to_string(), "y".to_string(), Some(0.6)),
            ("z".to_string(), "b".to_string(), "z".to_string(), Some(0.4)),
        ];
        let tree = MulticastTree::from_records(&links, &[]).unwrap();
        let params = LinkParams::from_topology(tree.topology()).unwrap();
        let obs = simulate_tree(&tree, &params, 4000, 17).unwrap();
        let ex = exhaustive_subset_counts(&obs, &tree, "b").unwrap();
        let ind = ReachIndicators::for_tree_node(&obs, &tree, "b").unwrap();
        let mut fast = NodeStats::from_indicators(&ind, 16).unwrap();
        assert_eq!(ex.nk1, fast.nk1);
        for m in 1u64..8 {
            assert_eq!(ex.count(m), fast.materialize(m), "mask {m:b}");
        }
        // Eq-3 alternating sum reproduces the union count exactly.
        let s = inclusion_exclusion_union(ex.materialized(), 0b111);
        assert_eq!(s, ex.nk1 as i128);
    }

    #[test]
    fn exhaustive_on_empty_matrix_is_zero() {
        let links = vec![
            (
                "b".to_string(),
                "root".to_string(),
                "b".to_string(),
                Some(0.0001),
            ),
            (
                "x".to_string(),
                "b".to_string(),
                "x".to_string(),
                Some(0.0001),
            ),
            (
                "y".to_string(),
                "b".to_string(),
                "y".to_string(),
                Some(0.0001),
            ),
        ];
        let tree = MulticastTree::from_records(&links, &[]).unwrap();
        let params = LinkParams::from_topology(tree.topology()).unwrap();
        let obs = simulate_tree(&tree, &params, 50, 3).unwrap();
        let ex = exhaustive_subset_counts(&obs, &tree, "b").unwrap();
        assert_eq!(ex.nk1, 0);
        assert!(ex.materialized().values().all(|&c| c == 0));
    }

    #[test]
    fn union_find_matches_simple_graph() {
        // edges 0-1, 2-3; component masks {0,1}, {2,3}, {4}
        let comps = union_find_components(5, &[(0, 1), (2, 3)]);
        assert_eq!(comps, vec![0b00011, 0b01100, 0b10000]);
    }
}
