//! Class-matched maximum-likelihood estimation of path pass rates on trees.
//!
//! Every internal node's observation is classified, singleton partitions are
//! stripped (their terms cancel from the likelihood equation), and the
//! matching solver runs:
//!
//! * perfect: unique root of `1 - x = prod_j (1 - alpha_j x)` with
//!   `A = gamma_k / x`,
//! * perfect with high fan-out: the two-group closed form
//!   `A = g1 g2 / (g1 + g2 - gamma_k)`,
//! * chained: the same polynomial with the zero-count expansion terms
//!   removed,
//! * partitioned: the pooled two-group closed form over the exclusive
//!   components,
//! * chained partition: the summed per-component corrected equations, solved
//!   numerically.
//!
//! All polynomial roots are found on x in (0, 1] by bracketed bisection with
//! safeguarded Newton refinement; x = 0 is always a root of the defining
//! polynomial and is excluded by checking the integer-count condition
//! `sum_j n_j(1) > n_k(1)` before bracketing.

use std::collections::BTreeMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::classifier::{
    classify_node, ClassifyError, ComponentKind, DataClass, MissingTerms, PartitionStructure,
};
use crate::simulator::ObservationMatrix;
use crate::statistics::{
    mask_members, NodeStats, ReachIndicators, StatsError, SubsetMask, DEFAULT_ENUMERATION_CAP,
};
use crate::topology::MulticastTree;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("complete mutual exclusion at node {node}: the observations carry no correlated information; send more probes")]
    CompleteExclusion { node: String },
    #[error("node {node} has an empty observation: no information")]
    NoInformation { node: String },
    #[error("invalid grouping at node {node}: {msg}")]
    InvalidGrouping { node: String, msg: String },
    #[error("degenerate data at node {node}: {msg}")]
    DegenerateData { node: String, msg: String },
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Which solver produced an estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    PerfectPoly,
    GroupedClosedForm,
    ChainedPoly,
    PartitionPooled,
    ChainedPartitionPoly,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::PerfectPoly => "perfect-poly",
            Method::GroupedClosedForm => "grouped-closed-form",
            Method::ChainedPoly => "chained-poly",
            Method::PartitionPooled => "partition-pooled",
            Method::ChainedPartitionPoly => "chained-partition-poly",
        }
    }
}

/// A path pass-rate estimate for one node.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub node: String,
    pub a_hat: f64,
    pub method: Method,
    pub class: DataClass,
    /// |h(x)| of the defining equation at the returned root (0 for closed
    /// forms evaluated exactly).
    pub residual: f64,
    pub iterations: u32,
    pub stripped_singletons: Vec<String>,
    /// Observed union rate n_k(1)/n before stripping.
    pub gamma_hat: f64,
    /// Exact 1-D maximizer of the per-component binomial likelihood, recorded
    /// for the pooled closed form whose derivation approximates it.
    pub exact_mle: Option<f64>,
    pub flags: Vec<String>,
}

impl Estimate {
    pub fn saturated(&self) -> bool {
        self.flags.iter().any(|f| f == "saturated")
    }

    fn finish(mut self) -> Self {
        if self.a_hat > 1.0 && !self.flags.iter().any(|f| f == "saturated") {
            self.flags.push("saturated".into());
        }
        if self.a_hat < self.gamma_hat && !self.flags.iter().any(|f| f == "below-gamma") {
            self.flags.push("below-gamma".into());
        }
        self
    }
}

/// A per-link pass-rate estimate derived from path-estimate ratios.
#[derive(Debug, Clone)]
pub struct LinkEstimate {
    pub link: String,
    /// Ratio of path estimates; may exceed 1 at small n, in which case it is
    /// flagged rather than silently clamped.
    pub pass_rate: Option<f64>,
    pub flags: Vec<String>,
}

impl LinkEstimate {
    pub fn loss_rate(&self) -> Option<f64> {
        self.pass_rate.map(|p| 1.0 - p)
    }
}

/// Solver configuration.
#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Tolerance on |h(x)| at the accepted root.
    pub tol: f64,
    /// Perfect-class fan-out at which the grouped closed form takes over.
    pub grouping_threshold: usize,
    /// Subset enumeration cap for missing-term discovery.
    pub enumeration_cap: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-10,
            grouping_threshold: 5,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
        }
    }
}

// ---------------------------------------------------------------------------
// Core polynomial machinery
// ---------------------------------------------------------------------------

/// One component's contribution to the likelihood equation, expanded in
/// x-space: `phi_j(x) = c0_j - sum_t sign_t coef_t x^(deg_t)`.
pub(crate) struct ComponentPoly {
    c0: f64,
    /// (signed coefficient, degree >= 1) of each retained expansion term.
    terms: Vec<(f64, i32)>,
}

impl ComponentPoly {
    /// Builds the x-space polynomial of one component. `rhos[i]` are the
    /// member rates gamma_i divided by the reference rate; `comp_r` is the
    /// component union rate over the reference rate; `excluded` lists
    /// member-index subsets (local bitmasks over `rhos`) whose expansion
    /// terms the data lacks.
    pub(crate) fn new(rhos: &[f64], comp_r: f64, excluded: &[u64]) -> Self {
        let d = rhos.len();
        let c0 = rhos.iter().sum::<f64>() - comp_r;
        let mut terms = Vec::new();
        for bits in 1u64..(1 << d) {
            let size = bits.count_ones() as i32;
            if size < 2 || excluded.contains(&bits) {
                continue;
            }
            let prod: f64 = (0..d)
                .filter(|&i| bits >> i & 1 == 1)
                .map(|i| rhos[i])
                .product();
            let sign = if size % 2 == 0 { 1.0 } else { -1.0 };
            terms.push((sign * prod, size - 1));
        }
        ComponentPoly { c0, terms }
    }

    fn eval(&self, x: f64) -> f64 {
        let mut acc = self.c0;
        for &(coef, deg) in &self.terms {
            acc -= coef * x.powi(deg);
        }
        acc
    }

    fn deriv(&self, x: f64) -> f64 {
        let mut acc = 0.0;
        for &(coef, deg) in &self.terms {
            acc -= coef * deg as f64 * x.powi(deg - 1);
        }
        acc
    }
}

pub(crate) struct RootResult {
    pub(crate) x: f64,
    pub(crate) residual: f64,
    pub(crate) iterations: u32,
}

/// Finds the root of `phi(x) = sum_j phi_j(x)` on (0, 1], where phi is
/// positive near 0 (checked by the caller through integer counts) and the
/// estimate is `gamma_ref / x`.
pub(crate) fn solve_phi(polys: &[ComponentPoly], tol: f64) -> Result<RootResult, String> {
    let phi = |x: f64| polys.iter().map(|p| p.eval(x)).sum::<f64>();
    let dphi = |x: f64| polys.iter().map(|p| p.deriv(x)).sum::<f64>();

    let mut iterations = 0u32;
    const SCAN: usize = 256;
    let mut lo = 1e-12;
    if phi(lo) <= 0.0 {
        return Err(format!("phi({lo:e}) is not positive"));
    }
    let mut bracket = None;
    for k in 1..=SCAN {
        let x = k as f64 / SCAN as f64;
        let fx = phi(x);
        iterations += 1;
        if fx <= 0.0 {
            bracket = Some((x, fx));
            break;
        }
        lo = x;
    }
    let Some((mut hi, fhi)) = bracket else {
        return Err("no sign change in (0, 1]".into());
    };
    if fhi == 0.0 {
        return Ok(RootResult {
            x: hi,
            residual: 0.0,
            iterations,
        });
    }
    // Bisection with safeguarded Newton refinement.
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        iterations += 1;
        let fx = phi(x);
        if fx.abs() <= tol || (hi - lo) < 1e-15 {
            return Ok(RootResult {
                x,
                residual: fx.abs(),
                iterations,
            });
        }
        if fx > 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let d = dphi(x);
        let newton = x - fx / d;
        x = if d.is_finite() && d != 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    let fx = phi(x);
    Ok(RootResult {
        x,
        residual: fx.abs(),
        iterations,
    })
}

/// Splits the members of `mask` into two balanced groups: members sorted by
/// observation count descending, assigned alternately, which keeps the two
/// group union counts close and the joint count large.
pub fn balanced_split(stats: &NodeStats, mask: SubsetMask) -> (SubsetMask, SubsetMask) {
    let mut members = mask_members(mask);
    members.sort_by_key(|&j| (std::cmp::Reverse(stats.child_count(j)), j));
    let mut g1 = 0u64;
    let mut g2 = 0u64;
    for (i, &j) in members.iter().enumerate() {
        if i % 2 == 0 {
            g1 |= 1 << j;
        } else {
            g2 |= 1 << j;
        }
    }
    (g1, g2)
}

/// Maps a global child-subset mask to a bitmask over `members` positions.
fn localize(mask: SubsetMask, members: &[usize]) -> u64 {
    let mut local = 0u64;
    for (i, &j) in members.iter().enumerate() {
        if mask >> j & 1 == 1 {
            local |= 1 << i;
        }
    }
    local
}

// ---------------------------------------------------------------------------
// Per-class solvers
// ---------------------------------------------------------------------------

/// Perfect class: unique root of `1 - x = prod_j (1 - alpha_j x)` on (0, 1],
/// with `A = gamma_k / x`.
pub fn solve_perfect(stats: &NodeStats, opts: &SolverOptions) -> Result<Estimate, EstimatorError> {
    if !stats.alpha_sum_exceeds_one() {
        return Err(EstimatorError::CompleteExclusion {
            node: stats.node.clone(),
        });
    }
    let gamma = stats.gamma_hat();
    let alphas: Vec<f64> = (0..stats.fanout()).map(|j| stats.alpha_hat(j)).collect();
    let poly = ComponentPoly::new(&alphas, 1.0, &[]);
    let root = solve_phi(&[poly], opts.tol).map_err(|msg| EstimatorError::DegenerateData {
        node: stats.node.clone(),
        msg,
    })?;
    Ok(Estimate {
        node: stats.node.clone(),
        a_hat: gamma / root.x,
        method: Method::PerfectPoly,
        class: DataClass::Perfect,
        residual: root.residual,
        iterations: root.iterations,
        stripped_singletons: Vec::new(),
        gamma_hat: gamma,
        exact_mle: None,
        flags: Vec::new(),
    }
    .finish())
}

/// Perfect class through the equivalent two-group transformation:
/// `A = g1 g2 / (g1 + g2 - gamma_k)` where `g1`, `g2` are the group union
/// rates. The groups must partition the descendants and jointly observe at
/// least one probe.
pub fn solve_grouped(
    stats: &NodeStats,
    groups: (SubsetMask, SubsetMask),
    _opts: &SolverOptions,
) -> Result<Estimate, EstimatorError> {
    let (k1, k2) = groups;
    let full = stats.full_mask();
    if k1 == 0 || k2 == 0 || k1 & k2 != 0 || k1 | k2 != full {
        return Err(EstimatorError::InvalidGrouping {
            node: stats.node.clone(),
            msg: "groups must be disjoint, non-empty, and cover all descendants".into(),
        });
    }
    let joint = stats.joint_union_count(k1, k2);
    if joint == 0 {
        return Err(EstimatorError::InvalidGrouping {
            node: stats.node.clone(),
            msg: "the two groups never observe a probe jointly".into(),
        });
    }
    let n = stats.n as f64;
    let c1 = stats.union_count(k1);
    let c2 = stats.union_count(k2);
    let a_hat = (c1 as u128 * c2 as u128) as f64 / (n * joint as f64);
    let gamma = stats.gamma_hat();
    // Residual of the grouped relation g1 g2 / A = g1 + g2 - gamma_k.
    let residual = ((c1 as f64 / n) * (c2 as f64 / n) / a_hat - joint as f64 / n).abs();
    Ok(Estimate {
        node: stats.node.clone(),
        a_hat,
        method: Method::GroupedClosedForm,
        class: DataClass::Perfect,
        residual,
        iterations: 0,
        stripped_singletons: Vec::new(),
        gamma_hat: gamma,
        exact_mle: None,
        flags: Vec::new(),
    }
    .finish())
}

/// Chained-only class: the perfect polynomial with the expansion terms of the
/// zero-count subsets removed.
pub fn solve_chained(
    stats: &NodeStats,
    me: &MissingTerms,
    opts: &SolverOptions,
) -> Result<Estimate, EstimatorError> {
    if !stats.alpha_sum_exceeds_one() {
        return Err(EstimatorError::CompleteExclusion {
            node: stats.node.clone(),
        });
    }
    let gamma = stats.gamma_hat();
    let alphas: Vec<f64> = (0..stats.fanout()).map(|j| stats.alpha_hat(j)).collect();
    let excluded: Vec<u64> = me.subsets.iter().copied().collect();
    let poly = ComponentPoly::new(&alphas, 1.0, &excluded);
    let root = solve_phi(&[poly], opts.tol).map_err(|msg| EstimatorError::DegenerateData {
        node: stats.node.clone(),
        msg,
    })?;
    Ok(Estimate {
        node: stats.node.clone(),
        a_hat: gamma / root.x,
        method: Method::ChainedPoly,
        class: DataClass::ChainedOnly,
        residual: root.residual,
        iterations: root.iterations,
        stripped_singletons: Vec::new(),
        gamma_hat: gamma,
        exact_mle: None,
        flags: Vec::new(),
    }
    .finish())
}

/// Partition-only class: each multi-member component (internally perfect) is
/// reduced to two groups; the pooled closed form is
/// `A = sum_i c_i1 c_i2 / (n sum_i o_i)`. Singleton components contribute
/// nothing to either sum (their likelihood terms cancel identically).
pub fn solve_partition_only(
    stats: &NodeStats,
    parts: &PartitionStructure,
    _opts: &SolverOptions,
) -> Result<Estimate, EstimatorError> {
    let n = stats.n as f64;
    let mut num: u128 = 0;
    let mut joint_sum: u64 = 0;
    let mut binom = Vec::new();
    for comp in &parts.components {
        if comp.size() < 2 {
            continue;
        }
        let (g1, g2) = balanced_split(stats, comp.mask);
        let c1 = stats.union_count(g1);
        let c2 = stats.union_count(g2);
        let o = stats.joint_union_count(g1, g2);
        num += c1 as u128 * c2 as u128;
        joint_sum += o;
        let nk = stats.union_count(comp.mask);
        binom.push((nk, c1, c2, o));
    }
    if joint_sum == 0 {
        return Err(EstimatorError::CompleteExclusion {
            node: stats.node.clone(),
        });
    }
    let a_hat = num as f64 / (n * joint_sum as f64);
    // Residual of the pooled relation sum_i c1 c2 / (n A) = sum_i o_i.
    let residual = (num as f64 / (n * a_hat) - joint_sum as f64).abs() / n;
    let exact_mle = partition_exact_mle(stats.n, &binom);
    let gamma = stats.gamma_hat();
    Ok(Estimate {
        node: stats.node.clone(),
        a_hat,
        method: Method::PartitionPooled,
        class: DataClass::PartitionOnly,
        residual,
        iterations: 0,
        stripped_singletons: Vec::new(),
        gamma_hat: gamma,
        exact_mle,
        flags: Vec::new(),
    }
    .finish())
}

/// Exact maximizer of the per-component binomial likelihood
/// `sum_j [n_kj(1) log A + n_kj(0) log(1 - A beta_j)]` with each beta held at
/// its self-consistent empirical value `gamma_kj / A_j*`. The pooled closed
/// form approximates this; both are reported so the gap stays visible.
fn partition_exact_mle(n: u64, comps: &[(u64, u64, u64, u64)]) -> Option<f64> {
    let n = n as f64;
    let mut terms = Vec::new();
    let mut hi = 1.0f64;
    for &(nk, c1, c2, o) in comps {
        if o == 0 || c1 == 0 || c2 == 0 {
            return None;
        }
        let beta = (nk as u128 * o as u128) as f64 / (c1 as u128 * c2 as u128) as f64;
        if !(beta > 0.0 && beta <= 1.0) {
            return None;
        }
        hi = hi.min((1.0 / beta) * (1.0 - 1e-12));
        terms.push((nk as f64, n - nk as f64, beta));
    }
    // The derivative sum_j [n1/A - n0 beta/(1 - A beta)] is strictly
    // decreasing on (0, hi); bisect its unique zero.
    let d = |a: f64| -> f64 {
        terms
            .iter()
            .map(|&(n1, n0, b)| n1 / a - n0 * b / (1.0 - a * b))
            .sum()
    };
    let mut lo = 1e-12;
    if d(lo) <= 0.0 {
        return None;
    }
    if d(hi) >= 0.0 {
        return Some(hi);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if d(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 {
            break;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Chained-partition class: the summed per-component corrected equations,
/// solved numerically in x-space. Perfect components keep their full
/// expansion; chained ones drop their missing terms; singletons cancel
/// identically.
///
/// The substitution is `x = gamma_min / A` with `gamma_min` the smallest
/// multi-member component union rate: every component-local estimate is at
/// least its own union rate, so the summed equation's root stays in (0, 1].
/// (The pooled estimate can fall below the total union rate `gamma_k`, which
/// components split between them, so `gamma_k` itself is not a valid
/// reference here.)
pub fn solve_chained_partition(
    stats: &NodeStats,
    parts: &PartitionStructure,
    me: &MissingTerms,
    opts: &SolverOptions,
) -> Result<Estimate, EstimatorError> {
    let nk_ref = parts
        .components
        .iter()
        .filter(|c| c.size() >= 2)
        .map(|c| stats.union_count(c.mask))
        .min()
        .unwrap_or(0);
    if nk_ref == 0 {
        return Err(EstimatorError::NoInformation {
            node: stats.node.clone(),
        });
    }
    let gamma_ref = nk_ref as f64 / stats.n as f64;
    let mut member_sum: u64 = 0;
    let mut comp_sum: u64 = 0;
    let mut polys = Vec::new();
    for comp in &parts.components {
        let members = mask_members(comp.mask);
        let rhos: Vec<f64> = members
            .iter()
            .map(|&j| stats.child_count(j) as f64 / nk_ref as f64)
            .collect();
        let comp_nk = stats.union_count(comp.mask);
        member_sum += members.iter().map(|&j| stats.child_count(j)).sum::<u64>();
        comp_sum += comp_nk;
        let excluded: Vec<u64> = match comp.kind {
            ComponentKind::Chained => me
                .within(comp.mask)
                .into_iter()
                .map(|m| localize(m, &members))
                .collect(),
            _ => Vec::new(),
        };
        polys.push(ComponentPoly::new(
            &rhos,
            comp_nk as f64 / nk_ref as f64,
            &excluded,
        ));
    }
    if member_sum <= comp_sum {
        return Err(EstimatorError::CompleteExclusion {
            node: stats.node.clone(),
        });
    }
    let root = solve_phi(&polys, opts.tol).map_err(|msg| EstimatorError::DegenerateData {
        node: stats.node.clone(),
        msg,
    })?;
    Ok(Estimate {
        node: stats.node.clone(),
        a_hat: gamma_ref / root.x,
        method: Method::ChainedPartitionPoly,
        class: DataClass::ChainedPartition,
        residual: root.residual,
        iterations: root.iterations,
        stripped_singletons: Vec::new(),
        gamma_hat: stats.gamma_hat(),
        exact_mle: None,
        flags: Vec::new(),
    }
    .finish())
}

/// Removes singleton components from the estimation problem. Their terms
/// appear identically on both sides of the partitioned likelihood equation
/// and cancel, so the estimate over the reduced components equals the
/// estimate with them retained.
pub struct SingletonStripped {
    /// Multi-member components only.
    pub parts: PartitionStructure,
    /// Child positions of the stripped singletons.
    pub stripped: Vec<usize>,
    /// Union count over the remaining members.
    pub nk1_reduced: u64,
}

pub fn strip_singletons(stats: &NodeStats, parts: &PartitionStructure) -> SingletonStripped {
    let mut kept = Vec::new();
    let mut stripped = Vec::new();
    for comp in &parts.components {
        if comp.size() >= 2 {
            kept.push(comp.clone());
        } else {
            stripped.extend(comp.members());
        }
    }
    let mask = kept.iter().fold(0u64, |m, c| m | c.mask);
    let nk1_reduced = if mask == 0 {
        0
    } else {
        stats.union_count(mask)
    };
    SingletonStripped {
        parts: PartitionStructure { components: kept },
        stripped,
        nk1_reduced,
    }
}

/// Classifies one node's observation and dispatches to the matching solver.
pub fn estimate_node(
    stats: &mut NodeStats,
    opts: &SolverOptions,
) -> Result<Estimate, EstimatorError> {
    if stats.nk1 == 0 {
        return Err(EstimatorError::NoInformation {
            node: stats.node.clone(),
        });
    }
    let (class, parts, me) = classify_node(stats)?;
    match class {
        DataClass::Perfect => {
            if stats.fanout() >= opts.grouping_threshold {
                solve_grouped(stats, balanced_split(stats, stats.full_mask()), opts)
            } else {
                solve_perfect(stats, opts)
            }
        }
        DataClass::ChainedOnly => solve_chained(stats, &me, opts),
        DataClass::PartitionOnly => {
            let stripped = strip_singletons(stats, &parts);
            let mut est = solve_partition_only(stats, &stripped.parts, opts)?;
            est.stripped_singletons = stripped
                .stripped
                .iter()
                .map(|&j| stats.children[j].clone())
                .collect();
            Ok(est)
        }
        DataClass::ChainedPartition => {
            let stripped = strip_singletons(stats, &parts);
            let mut est = solve_chained_partition(stats, &stripped.parts, &me, opts)?;
            est.stripped_singletons = stripped
                .stripped
                .iter()
                .map(|&j| stats.children[j].clone())
                .collect();
            Ok(est)
        }
        DataClass::CompleteExclusion => Err(EstimatorError::CompleteExclusion {
            node: stats.node.clone(),
        }),
    }
}

/// A failed node estimation, kept alongside the successes.
#[derive(Debug, Clone)]
pub struct NodeFailure {
    pub node: String,
    pub class: Option<DataClass>,
    pub message: String,
}

/// Estimates for a whole tree: per-node path estimates and per-link rates.
#[derive(Debug)]
pub struct TreeEstimates {
    /// One entry per internal node with at least one descendant observation
    /// attempt; failures are carried, not fatal.
    pub nodes: BTreeMap<String, Result<Estimate, NodeFailure>>,
    /// Leaf path rates: a receiver's own reception rate n_j(1)/n.
    pub leaf_gamma: BTreeMap<String, f64>,
    /// Per-link pass-rate estimates, sorted by link id.
    pub links: Vec<LinkEstimate>,
}

impl TreeEstimates {
    pub fn failed_nodes(&self) -> Vec<&NodeFailure> {
        self.nodes
            .values()
            .filter_map(|r| r.as_ref().err())
            .collect()
    }

    pub fn node_estimate(&self, node: &str) -> Option<&Estimate> {
        self.nodes.get(node).and_then(|r| r.as_ref().ok())
    }

    pub fn link(&self, id: &str) -> Option<&LinkEstimate> {
        self.links.iter().find(|l| l.link == id)
    }
}

/// Runs classification and estimation for every internal node, then derives
/// per-link pass rates as ratios of path estimates. Node failures are
/// isolated: siblings still get estimates, and links missing an endpoint
/// estimate are flagged instead of fabricated.
pub fn estimate_tree(
    obs: &ObservationMatrix,
    tree: &MulticastTree,
    opts: &SolverOptions,
) -> Result<TreeEstimates, EstimatorError> {
    let topo = tree.topology();
    let internals = tree.internal_nodes();
    let estimates: Vec<(String, Result<Estimate, NodeFailure>)> = internals
        .par_iter()
        .map(|&ix| {
            let name = topo.node_name(ix).to_string();
            let mut class = None;
            let result = ReachIndicators::for_node_rows(obs, topo, ix, 0, obs.n_probes())
                .map_err(EstimatorError::from)
                .and_then(|ind| {
                    NodeStats::from_indicators(&ind, opts.enumeration_cap).map_err(Into::into)
                })
                .and_then(|mut stats| {
                    class = classify_node(&mut stats).ok().map(|(c, _, _)| c);
                    estimate_node(&mut stats, opts)
                });
            let result = result.map_err(|e| NodeFailure {
                node: name.clone(),
                class,
                message: e.to_string(),
            });
            (name, result)
        })
        .collect();
    let mut nodes: BTreeMap<String, Result<Estimate, NodeFailure>> = BTreeMap::new();
    for (name, r) in estimates {
        nodes.insert(name, r);
    }

    let n = obs.n_probes() as f64;
    let mut leaf_gamma = BTreeMap::new();
    for (col, &recv) in topo.receivers().iter().enumerate() {
        leaf_gamma.insert(
            topo.node_name(recv).to_string(),
            obs.column(col).count_ones() as f64 / n,
        );
    }

    // Path estimate for a node, clamped to 1 for use inside link ratios.
    let path = |name: &str| -> Option<(f64, bool)> {
        if let Some(&g) = leaf_gamma.get(name) {
            return Some((g, false));
        }
        match nodes.get(name) {
            Some(Ok(est)) => {
                let clamped = est.a_hat > 1.0;
                Some((est.a_hat.min(1.0), clamped))
            }
            _ => None,
        }
    };

    let mut links = Vec::new();
    let mut sorted_links: Vec<&crate::topology::Link> = topo.links().iter().collect();
    sorted_links.sort_by(|a, b| a.id.cmp(&b.id));
    for l in sorted_links {
        let child_name = topo.node_name(l.child);
        let parent_name = topo.node_name(l.parent);
        let mut flags = Vec::new();
        let child_path = path(child_name);
        let parent_path = if l.parent == tree.root() {
            Some((1.0, false))
        } else {
            path(parent_name)
        };
        let pass_rate = match (child_path, parent_path) {
            (Some((c, c_clamped)), Some((p, p_clamped))) => {
                if c_clamped {
                    flags.push("child-saturated".into());
                }
                if p_clamped {
                    flags.push("parent-saturated".into());
                }
                let ratio = c / p;
                if ratio > 1.0 {
                    flags.push("ratio-gt-1".into());
                }
                Some(ratio)
            }
            (None, _) => {
                flags.push("no-child-estimate".into());
                None
            }
            (_, None) => {
                flags.push("no-parent-estimate".into());
                None
            }
        };
        links.push(LinkEstimate {
            link: l.id.clone(),
            pass_rate,
            flags,
        });
    }
    Ok(TreeEstimates {
        nodes,
        leaf_gamma,
        links,
    })
}
