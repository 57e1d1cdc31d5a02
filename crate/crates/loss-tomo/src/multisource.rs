//! Estimation on multi-source general topologies: joint-node pass rates from
//! pooled statistics, individual-vs-global observation consistency, and the
//! divide-and-conquer decomposition into trees.
//!
//! A joint node (several parents) and a shared node (one parent, several
//! sources) are handled identically; after decomposition the shared region
//! hangs below its joint node and needs no separate treatment.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::bitset::ProbeSet;
use crate::classifier::{
    classify_node, ClassifyError, DataClass, MissingTerms, PartitionStructure,
};
use crate::estimators::{solve_phi, ComponentPoly, EstimatorError, SolverOptions, TreeEstimates};
use crate::simulator::{ObservationMatrix, SourceBlock};
use crate::statistics::{pooled_stats, MultiSourceNodeStats, StatsError, SubsetMask};
use crate::topology::{GeneralTopology, MulticastTree, TopologyError};

#[derive(Debug, Error)]
pub enum MultiSourceError {
    #[error("node {node}: individual observations are inconsistent ({class}); per-source classes {per_source:?}; send more probes until the views agree")]
    Inconsistent {
        node: String,
        class: &'static str,
        per_source: Vec<(String, String)>,
    },
    #[error("node {node}: no source delivers probes that reach it")]
    NoReachingProbes { node: String },
    #[error("node {node}: called the wrong solver for class {class}")]
    PreconditionViolation { node: String, class: &'static str },
    #[error("complete mutual exclusion at joint node {node} on pooled counts; send more probes")]
    CompleteExclusion { node: String },
    #[error("degenerate data at joint node {node}: {msg}")]
    DegenerateData { node: String, msg: String },
    #[error("source {source_node} upstream region is not a tree: node {node} reachable twice; decomposition unsupported for this shape")]
    UpstreamNotTree { source_node: String, node: String },
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

/// Table of individual-vs-global observation consistency for a shared
/// subtree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MultiObsClass {
    /// Every individual observation is perfect (the global follows).
    PerfectPerfect,
    /// Some individual imperfect but the pooled view is perfect: the views
    /// disagree with the model, no estimate.
    OthersPerfect,
    /// All individual observations share one class, partition structure, and
    /// missing-term pattern, and the global matches it.
    OthersIdenticalOthers,
    /// Mutually inconsistent views, no estimate.
    OthersOthers,
}

impl MultiObsClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            MultiObsClass::PerfectPerfect => "(perfect, perfect)",
            MultiObsClass::OthersPerfect => "(others, perfect)",
            MultiObsClass::OthersIdenticalOthers => "(others, identical-others)",
            MultiObsClass::OthersOthers => "(others, others)",
        }
    }
}

/// Outcome of classifying a joint node's observations.
#[derive(Debug, Clone)]
pub struct JointClassification {
    pub node: String,
    pub class: MultiObsClass,
    /// (source, class) for every source with observations.
    pub per_source: Vec<(String, DataClass)>,
    /// Shared individual pattern when the class is identical-others.
    pub shared_pattern: Option<(DataClass, PartitionStructure, MissingTerms)>,
    /// Sources excluded for lack of probes reaching the node.
    pub warnings: Vec<String>,
}

/// Pass-rate estimate at a joint node.
#[derive(Debug, Clone)]
pub struct JointEstimate {
    pub node: String,
    /// Pass rate of the shared subtree: the probability a probe that reached
    /// the node is observed below it.
    pub x_hat: f64,
    /// Per-source path pass rates A(s, i) = gamma_i(s) / x_hat.
    pub per_source_a: BTreeMap<String, f64>,
    pub obs_class: MultiObsClass,
    pub residual: f64,
    pub iterations: u32,
    pub warnings: Vec<String>,
}

/// Classifies a joint (or shared) node per the individual/global table.
pub fn classify_joint(ms: &MultiSourceNodeStats) -> Result<JointClassification, MultiSourceError> {
    let mut per_source = Vec::new();
    let mut patterns: Vec<(DataClass, PartitionStructure, MissingTerms)> = Vec::new();
    let mut warnings = Vec::new();
    for (source, stats) in &ms.per_source {
        if stats.nk1 == 0 {
            warnings.push(format!(
                "source {source} excluded: no probes reach {}",
                ms.node
            ));
            continue;
        }
        let mut s = stats.clone();
        let (class, parts, me) = classify_node(&mut s)?;
        per_source.push((source.clone(), class));
        patterns.push((class, parts, me));
    }
    if per_source.is_empty() {
        return Err(MultiSourceError::NoReachingProbes {
            node: ms.node.clone(),
        });
    }
    let mut pooled = ms.pooled.clone();
    let (global_class, global_parts, global_me) = classify_node(&mut pooled)?;

    let all_perfect = per_source.iter().all(|(_, c)| *c == DataClass::Perfect);
    if all_perfect {
        return Ok(JointClassification {
            node: ms.node.clone(),
            class: MultiObsClass::PerfectPerfect,
            per_source,
            shared_pattern: None,
            warnings,
        });
    }
    if global_class == DataClass::Perfect {
        return Ok(JointClassification {
            node: ms.node.clone(),
            class: MultiObsClass::OthersPerfect,
            per_source,
            shared_pattern: None,
            warnings,
        });
    }
    let first = &patterns[0];
    let identical = patterns
        .iter()
        .all(|p| p.0 == first.0 && p.1 == first.1 && p.2 == first.2);
    if identical {
        let global_matches =
            global_class == first.0 && global_parts == first.1 && global_me == first.2;
        if global_matches {
            return Ok(JointClassification {
                node: ms.node.clone(),
                class: MultiObsClass::OthersIdenticalOthers,
                per_source,
                shared_pattern: Some(first.clone()),
                warnings,
            });
        }
        warnings.push(format!(
            "individual observations of {} are identical but the global pattern differs",
            ms.node
        ));
    }
    Ok(JointClassification {
        node: ms.node.clone(),
        class: MultiObsClass::OthersOthers,
        per_source,
        shared_pattern: None,
        warnings,
    })
}

fn per_source_rates(ms: &MultiSourceNodeStats, x_hat: f64) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for (source, stats) in &ms.per_source {
        if stats.nk1 == 0 {
            continue;
        }
        let gamma = stats.nk1 as f64 / ms.probes_per_source[source] as f64;
        out.insert(source.clone(), gamma / x_hat);
    }
    out
}

/// Perfect-class joint estimation: the root of
/// `1 - x = prod_j (1 - alpha_j x)` with the source-pooled alpha ratios; the
/// per-source path rates follow from proportionality.
pub fn solve_joint_perfect(
    ms: &MultiSourceNodeStats,
    cls: &JointClassification,
    opts: &SolverOptions,
) -> Result<JointEstimate, MultiSourceError> {
    if cls.class != MultiObsClass::PerfectPerfect {
        return Err(MultiSourceError::PreconditionViolation {
            node: ms.node.clone(),
            class: cls.class.as_str(),
        });
    }
    solve_joint_poly(
        ms,
        cls,
        &MissingTerms::default(),
        MultiObsClass::PerfectPerfect,
        opts,
    )
}

/// Identical-others joint estimation: the summed per-source corrected
/// equations, which with identical patterns reduce to one corrected equation
/// in the pooled alpha ratios.
pub fn solve_joint_identical_others(
    ms: &MultiSourceNodeStats,
    cls: &JointClassification,
    opts: &SolverOptions,
) -> Result<JointEstimate, MultiSourceError> {
    if cls.class != MultiObsClass::OthersIdenticalOthers {
        return Err(MultiSourceError::PreconditionViolation {
            node: ms.node.clone(),
            class: cls.class.as_str(),
        });
    }
    let me = cls
        .shared_pattern
        .as_ref()
        .map(|(_, _, me)| me.clone())
        .unwrap_or_default();
    solve_joint_poly(ms, cls, &me, MultiObsClass::OthersIdenticalOthers, opts)
}

fn solve_joint_poly(
    ms: &MultiSourceNodeStats,
    cls: &JointClassification,
    me: &MissingTerms,
    class: MultiObsClass,
    opts: &SolverOptions,
) -> Result<JointEstimate, MultiSourceError> {
    let pooled = &ms.pooled;
    if !pooled.alpha_sum_exceeds_one() {
        return Err(MultiSourceError::CompleteExclusion {
            node: ms.node.clone(),
        });
    }
    let alphas: Vec<f64> = (0..pooled.fanout()).map(|j| pooled.alpha_hat(j)).collect();
    let excluded: Vec<SubsetMask> = me.subsets.iter().copied().collect();
    let poly = ComponentPoly::new(&alphas, 1.0, &excluded);
    let root = solve_phi(&[poly], opts.tol).map_err(|msg| MultiSourceError::DegenerateData {
        node: ms.node.clone(),
        msg,
    })?;
    Ok(JointEstimate {
        node: ms.node.clone(),
        x_hat: root.x,
        per_source_a: per_source_rates(ms, root.x),
        obs_class: class,
        residual: root.residual,
        iterations: root.iterations,
        warnings: cls.warnings.clone(),
    })
}

/// The rejection path for the two inconsistent classes: a structured error,
/// never an estimate.
pub fn reject_inconsistent(
    ms: &MultiSourceNodeStats,
    cls: &JointClassification,
) -> MultiSourceError {
    match cls.class {
        MultiObsClass::OthersPerfect | MultiObsClass::OthersOthers => {
            MultiSourceError::Inconsistent {
                node: ms.node.clone(),
                class: cls.class.as_str(),
                per_source: cls
                    .per_source
                    .iter()
                    .map(|(s, c)| (s.clone(), c.as_str().to_string()))
                    .collect(),
            }
        }
        other => MultiSourceError::PreconditionViolation {
            node: ms.node.clone(),
            class: other.as_str(),
        },
    }
}

/// Classifies and dispatches a joint node.
pub fn estimate_joint(
    ms: &MultiSourceNodeStats,
    opts: &SolverOptions,
) -> Result<JointEstimate, MultiSourceError> {
    let cls = classify_joint(ms)?;
    match cls.class {
        MultiObsClass::PerfectPerfect => solve_joint_perfect(ms, &cls, opts),
        MultiObsClass::OthersIdenticalOthers => solve_joint_identical_others(ms, &cls, opts),
        _ => Err(reject_inconsistent(ms, &cls)),
    }
}

/// What a derived tree represents.
#[derive(Debug, Clone, PartialEq)]
pub enum DerivedTreeKind {
    /// The region a single source reaches, cut at joint nodes (which appear
    /// as pseudo-receiver leaves).
    SourceRegion { source: String },
    /// The shared subtree hanging below a joint node, fed by a virtual
    /// source; rows are padded with unobserved probes up to the estimated
    /// reach count.
    JointSubtree {
        joint: String,
        x_hat: f64,
        padded_rows: u64,
    },
}

/// One tree of the decomposition with its derived observations.
#[derive(Debug)]
pub struct DerivedTree {
    pub tree: MulticastTree,
    pub observations: ObservationMatrix,
    pub kind: DerivedTreeKind,
    /// Pseudo-receiver leaves standing for joint nodes, with the shared
    /// subtree rate to divide out of the terminal link's estimate.
    pub pseudo_leaf_x: BTreeMap<String, f64>,
}

/// A joint node the decomposition could not resolve.
#[derive(Debug, Clone)]
pub struct BlockedJoint {
    pub node: String,
    pub reason: String,
}

/// Result of breaking a general topology into trees.
#[derive(Debug)]
pub struct Decomposition {
    pub trees: Vec<DerivedTree>,
    pub joint_estimates: BTreeMap<String, JointEstimate>,
    pub blocked: Vec<BlockedJoint>,
}

/// Breaks a general topology into per-source upstream trees and per-joint
/// shared subtrees. Each joint node's pass rate is estimated from pooled
/// statistics first; an unresolvable joint node blocks only its own subtree
/// (partial decomposition).
pub fn decompose(
    topo: &GeneralTopology,
    obs: &ObservationMatrix,
    opts: &SolverOptions,
) -> Result<Decomposition, MultiSourceError> {
    let joints = topo.joint_nodes();
    let joint_set: BTreeSet<usize> = joints.iter().copied().collect();
    let mut joint_estimates = BTreeMap::new();
    let mut blocked = Vec::new();
    for &j in &joints {
        let name = topo.node_name(j).to_string();
        // A probe observed below the node must have passed the node, for
        // every source pooled into its statistics; a route around the node
        // into its subtree breaks that relation.
        if let Some(spos) = topo
            .sources_reaching(j)
            .iter()
            .find(|&&spos| bypasses(topo, topo.sources()[spos], j))
        {
            blocked.push(BlockedJoint {
                node: name,
                reason: format!(
                    "source {} reaches receivers below the node without passing it",
                    topo.node_name(topo.sources()[*spos])
                ),
            });
            continue;
        }
        match pooled_stats(obs, topo, &name, opts.enumeration_cap)
            .map_err(MultiSourceError::from)
            .and_then(|ms| estimate_joint(&ms, opts))
        {
            Ok(est) => {
                joint_estimates.insert(name, est);
            }
            Err(e) => blocked.push(BlockedJoint {
                node: name,
                reason: e.to_string(),
            }),
        }
    }

    let mut trees = Vec::new();
    // Upstream region per source: walk from the source, cutting at joint
    // nodes, which become pseudo-receiver leaves.
    for &src in topo.sources() {
        let source = topo.node_name(src).to_string();
        let Some(block) = obs.block_for(&source) else {
            continue;
        };
        let mut links: Vec<(String, String, String, Option<f64>)> = Vec::new();
        let mut pseudo: Vec<usize> = Vec::new();
        let mut real_leaves: Vec<usize> = Vec::new();
        let mut seen: BTreeSet<usize> = BTreeSet::new();
        let mut stack = vec![src];
        seen.insert(src);
        while let Some(v) = stack.pop() {
            for &(child, link_ix) in topo.children(v) {
                let l = &topo.links()[link_ix];
                links.push((
                    topo.node_name(child).to_string(),
                    topo.node_name(v).to_string(),
                    topo.node_name(child).to_string(),
                    l.pass_rate,
                ));
                if joint_set.contains(&child) {
                    if !pseudo.contains(&child) {
                        pseudo.push(child);
                    }
                    continue;
                }
                if !seen.insert(child) {
                    return Err(MultiSourceError::UpstreamNotTree {
                        source_node: source,
                        node: topo.node_name(child).to_string(),
                    });
                }
                if topo.children(child).is_empty() {
                    real_leaves.push(child);
                }
                stack.push(child);
            }
        }
        let tree = MulticastTree::from_records(&links, std::slice::from_ref(&source))?;
        // Columns: real receivers keep their observed bits; each joint leaf
        // gets the observed-below indicator over this source's rows.
        let mut col_names: Vec<(String, ColumnSpec)> = Vec::new();
        for &leaf in &real_leaves {
            let col = topo
                .receivers()
                .iter()
                .position(|&r| r == leaf)
                .expect("leaf is a receiver");
            col_names.push((topo.node_name(leaf).to_string(), ColumnSpec::Receiver(col)));
        }
        let mut pseudo_leaf_x = BTreeMap::new();
        for &jn in &pseudo {
            let jname = topo.node_name(jn).to_string();
            let x_hat = joint_estimates
                .get(&jname)
                .map(|e| e.x_hat)
                .unwrap_or(f64::NAN);
            pseudo_leaf_x.insert(jname.clone(), x_hat);
            col_names.push((jname, ColumnSpec::BelowNode(jn)));
        }
        col_names.sort_by(|a, b| a.0.cmp(&b.0));
        let observations = project_rows(obs, topo, &col_names, block.start, block.len, &source);
        trees.push(DerivedTree {
            tree,
            observations,
            kind: DerivedTreeKind::SourceRegion {
                source: topo.node_name(src).to_string(),
            },
            pseudo_leaf_x,
        });
    }

    // Shared subtree per resolved joint node, cut at nested joint nodes.
    for &j in &joints {
        let jname = topo.node_name(j).to_string();
        let Some(est) = joint_estimates.get(&jname) else {
            continue;
        };
        let vroot = format!("vsrc:{jname}");
        let mut links: Vec<(String, String, String, Option<f64>)> =
            vec![(jname.clone(), vroot.clone(), jname.clone(), None)];
        let mut pseudo: Vec<usize> = Vec::new();
        let mut real_leaves: Vec<usize> = Vec::new();
        let mut stack = vec![j];
        let mut seen: BTreeSet<usize> = [j].into();
        while let Some(v) = stack.pop() {
            for &(child, link_ix) in topo.children(v) {
                let l = &topo.links()[link_ix];
                links.push((
                    topo.node_name(child).to_string(),
                    topo.node_name(v).to_string(),
                    topo.node_name(child).to_string(),
                    l.pass_rate,
                ));
                if joint_set.contains(&child) {
                    if !pseudo.contains(&child) {
                        pseudo.push(child);
                    }
                    continue;
                }
                if !seen.insert(child) {
                    // Below a joint node every node has a single parent
                    // unless it is itself joint, so this cannot fire.
                    continue;
                }
                if topo.children(child).is_empty() {
                    real_leaves.push(child);
                }
                stack.push(child);
            }
        }
        let tree = MulticastTree::from_records(&links, std::slice::from_ref(&vroot))?;
        let mut col_names: Vec<(String, ColumnSpec)> = Vec::new();
        for &leaf in &real_leaves {
            let col = topo
                .receivers()
                .iter()
                .position(|&r| r == leaf)
                .expect("leaf is a receiver");
            col_names.push((topo.node_name(leaf).to_string(), ColumnSpec::Receiver(col)));
        }
        let mut pseudo_leaf_x = BTreeMap::new();
        for &nested in &pseudo {
            let nname = topo.node_name(nested).to_string();
            let x_hat = joint_estimates
                .get(&nname)
                .map(|e| e.x_hat)
                .unwrap_or(f64::NAN);
            pseudo_leaf_x.insert(nname.clone(), x_hat);
            col_names.push((nname, ColumnSpec::BelowNode(nested)));
        }
        col_names.sort_by(|a, b| a.0.cmp(&b.0));
        // Rows: probes of the node's own sources observed below it (those
        // provably passed the node), padded with unobserved rows up to the
        // estimated reach count.
        let observed_rows = collect_observed_rows(obs, topo, j);
        let n_obs = observed_rows.len() as u64;
        let n_hat = (n_obs as f64 / est.x_hat).round().max(n_obs as f64) as u64;
        if n_hat > 20_000_000 {
            blocked.push(BlockedJoint {
                node: jname,
                reason: format!(
                    "estimated reach count {n_hat} is implausibly large (x_hat {})",
                    est.x_hat
                ),
            });
            continue;
        }
        let observations =
            project_listed_rows(obs, topo, &col_names, &observed_rows, n_hat, &vroot);
        let padded = n_hat - n_obs;
        trees.push(DerivedTree {
            tree,
            observations,
            kind: DerivedTreeKind::JointSubtree {
                joint: jname,
                x_hat: est.x_hat,
                padded_rows: padded,
            },
            pseudo_leaf_x,
        });
    }
    Ok(Decomposition {
        trees,
        joint_estimates,
        blocked,
    })
}

enum ColumnSpec {
    /// A real receiver column of the source matrix.
    Receiver(usize),
    /// Observed anywhere below the given topology node.
    BelowNode(usize),
}

fn cell_for(
    obs: &ObservationMatrix,
    topo: &GeneralTopology,
    spec: &ColumnSpec,
    row: usize,
) -> bool {
    match spec {
        ColumnSpec::Receiver(c) => obs.cell(row, *c),
        ColumnSpec::BelowNode(v) => topo
            .receiver_cols_below(*v)
            .iter()
            .any(|&c| obs.cell(row, c)),
    }
}

fn project_rows(
    obs: &ObservationMatrix,
    topo: &GeneralTopology,
    cols: &[(String, ColumnSpec)],
    start: usize,
    len: usize,
    source: &str,
) -> ObservationMatrix {
    let mut sets = vec![ProbeSet::new(len); cols.len()];
    for (c, (_, spec)) in cols.iter().enumerate() {
        for i in 0..len {
            if cell_for(obs, topo, spec, start + i) {
                sets[c].insert(i);
            }
        }
    }
    ObservationMatrix::new(
        cols.iter().map(|(n, _)| n.clone()).collect(),
        vec![SourceBlock {
            source: source.to_string(),
            start: 0,
            len,
        }],
        sets,
    )
}

fn collect_observed_rows(
    obs: &ObservationMatrix,
    topo: &GeneralTopology,
    node: usize,
) -> Vec<usize> {
    let cols = topo.receiver_cols_below(node);
    let mut rows = Vec::new();
    for &spos in topo.sources_reaching(node) {
        let sname = topo.node_name(topo.sources()[spos]);
        let Some(block) = obs.block_for(sname) else {
            continue;
        };
        for row in block.start..block.start + block.len {
            if cols.iter().any(|&c| obs.cell(row, c)) {
                rows.push(row);
            }
        }
    }
    rows.sort_unstable();
    rows
}

/// True when `source_node` can deliver probes to a receiver below `avoid`
/// without passing through `avoid` itself.
fn bypasses(topo: &GeneralTopology, source_node: usize, avoid: usize) -> bool {
    let targets: BTreeSet<usize> = topo.receiver_cols_below(avoid).iter().copied().collect();
    let mut seen: BTreeSet<usize> = [source_node].into();
    let mut stack = vec![source_node];
    while let Some(v) = stack.pop() {
        if let Some(col) = topo.receivers().iter().position(|&r| r == v) {
            if targets.contains(&col) {
                return true;
            }
        }
        for &(child, _) in topo.children(v) {
            if child != avoid && seen.insert(child) {
                stack.push(child);
            }
        }
    }
    false
}

fn project_listed_rows(
    obs: &ObservationMatrix,
    topo: &GeneralTopology,
    cols: &[(String, ColumnSpec)],
    rows: &[usize],
    n_total: u64,
    source: &str,
) -> ObservationMatrix {
    let n = n_total as usize;
    let mut sets = vec![ProbeSet::new(n); cols.len()];
    for (i, &row) in rows.iter().enumerate() {
        for (c, (_, spec)) in cols.iter().enumerate() {
            if cell_for(obs, topo, spec, row) {
                sets[c].insert(i);
            }
        }
    }
    ObservationMatrix::new(
        cols.iter().map(|(n, _)| n.clone()).collect(),
        vec![SourceBlock {
            source: source.to_string(),
            start: 0,
            len: n,
        }],
        sets,
    )
}

/// A link estimate merged back from the decomposition, in input-topology link
/// ids.
#[derive(Debug, Clone)]
pub struct GeneralLinkEstimate {
    pub link: String,
    pub pass_rate: Option<f64>,
    pub flags: Vec<String>,
}

/// Full general-topology estimation: joint nodes, decomposition, per-tree
/// estimation, and the merge back to input link ids. Pseudo-leaf links carry
/// the shared-subtree rate, which is divided out of their estimates.
pub struct GeneralEstimates {
    pub joints: BTreeMap<String, JointEstimate>,
    pub blocked: Vec<BlockedJoint>,
    pub links: Vec<GeneralLinkEstimate>,
    pub tree_estimates: Vec<(DerivedTreeKind, TreeEstimates)>,
    pub decomposition_text: Vec<String>,
}

pub fn estimate_general(
    obs: &ObservationMatrix,
    topo: &GeneralTopology,
    opts: &SolverOptions,
) -> Result<GeneralEstimates, MultiSourceError> {
    let decomp = decompose(topo, obs, opts)?;
    let mut by_link: BTreeMap<String, GeneralLinkEstimate> = BTreeMap::new();
    let mut tree_estimates = Vec::new();
    let mut decomposition_text = Vec::new();
    for derived in &decomp.trees {
        decomposition_text.push(derived.tree.serialize());
        let est = crate::estimators::estimate_tree(&derived.observations, &derived.tree, opts)?;
        let dtopo = derived.tree.topology();
        for link in &est.links {
            // The derived tree names links after their child node; map back
            // to the input topology's link id via (parent, child).
            let child_ix = dtopo.node_index(&link.link).expect("derived link child");
            let parent_ix = derived.tree.parent(child_ix).expect("derived non-root");
            let parent = dtopo.node_name(parent_ix);
            let child = &link.link;
            if parent.starts_with("vsrc:") {
                continue; // virtual feed link, not part of the input topology
            }
            let Some(input_link) = topo.links().iter().find(|l| {
                topo.node_name(l.parent) == parent && topo.node_name(l.child) == child.as_str()
            }) else {
                continue;
            };
            let mut flags = link.flags.clone();
            let mut pass = link.pass_rate;
            if let Some(x_hat) = derived.pseudo_leaf_x.get(child) {
                if let Some(p) = pass {
                    if x_hat.is_finite() && *x_hat > 0.0 {
                        pass = Some(p / x_hat);
                        flags.push("joint-leaf-corrected".into());
                    } else {
                        pass = None;
                        flags.push("joint-unresolved".into());
                    }
                }
            }
            by_link.insert(
                input_link.id.clone(),
                GeneralLinkEstimate {
                    link: input_link.id.clone(),
                    pass_rate: pass,
                    flags,
                },
            );
        }
        tree_estimates.push((derived.kind.clone(), est));
    }
    for l in topo.links() {
        by_link
            .entry(l.id.clone())
            .or_insert_with(|| GeneralLinkEstimate {
                link: l.id.clone(),
                pass_rate: None,
                flags: vec!["blocked".into()],
            });
    }
    Ok(GeneralEstimates {
        joints: decomp.joint_estimates,
        blocked: decomp.blocked,
        links: by_link.into_values().collect(),
        tree_estimates,
        decomposition_text,
    })
}
