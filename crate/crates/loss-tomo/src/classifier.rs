//! Observation classification: assigns each node's data to one of the five
//! classes and produces the exclusive-partition decomposition and the
//! missing-term set the estimators consume.
//!
//! The classes are operationalized through the pairwise intersection graph:
//! exclusive partitions are its connected components, a component is perfect
//! iff the intersection count of the whole component is positive (by the
//! antitone property this already implies every subset is positive), and
//! chained otherwise.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::statistics::{mask_members, NodeStats, StatsError, SubsetMask};

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("node {0} has an empty observation (n_k(1) = 0): no information")]
    EmptyObservation(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// The data class of one node's observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DataClass {
    Perfect,
    ChainedOnly,
    PartitionOnly,
    ChainedPartition,
    CompleteExclusion,
}

impl DataClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            DataClass::Perfect => "perfect",
            DataClass::ChainedOnly => "chained-only",
            DataClass::PartitionOnly => "partition-only",
            DataClass::ChainedPartition => "chained-partition",
            DataClass::CompleteExclusion => "complete-exclusion",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComponentKind {
    Perfect,
    Chained,
    Singleton,
}

/// One exclusive partition of a node's descendants.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub mask: SubsetMask,
    pub kind: ComponentKind,
}

impl Component {
    pub fn members(&self) -> Vec<usize> {
        mask_members(self.mask)
    }

    pub fn size(&self) -> usize {
        self.mask.count_ones() as usize
    }
}

/// The exclusive-partition decomposition of a node's descendants.
///
/// Components are disjoint, cover every descendant, and are ordered by their
/// lowest member position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionStructure {
    pub components: Vec<Component>,
}

impl PartitionStructure {
    pub fn multi_components(&self) -> impl Iterator<Item = &Component> {
        self.components.iter().filter(|c| c.size() >= 2)
    }

    pub fn singletons(&self) -> impl Iterator<Item = &Component> {
        self.components.iter().filter(|c| c.size() == 1)
    }
}

/// Subsets with zero intersection count whose expansion terms must be removed
/// from the likelihood equation. Upward closed by antitonicity; every member
/// lies within a single component.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MissingTerms {
    pub subsets: BTreeSet<SubsetMask>,
}

impl MissingTerms {
    pub fn is_empty(&self) -> bool {
        self.subsets.is_empty()
    }

    /// Members lying inside `component`.
    pub fn within(&self, component: SubsetMask) -> Vec<SubsetMask> {
        self.subsets
            .iter()
            .copied()
            .filter(|m| m & component == *m)
            .collect()
    }
}

/// Pairwise intersection graph over the descendants: edge (i, j) iff
/// I({i, j}) > 0.
pub fn intersection_graph(stats: &NodeStats) -> Vec<Vec<usize>> {
    let d = stats.fanout();
    let mut adj = vec![Vec::new(); d];
    for i in 0..d {
        for j in i + 1..d {
            if stats.count(1u64 << i | 1u64 << j) > 0 {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    adj
}

fn connected_components(adj: &[Vec<usize>]) -> Vec<SubsetMask> {
    let d = adj.len();
    let mut seen = vec![false; d];
    let mut comps = Vec::new();
    for start in 0..d {
        if seen[start] {
            continue;
        }
        let mut mask = 0u64;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(v) = stack.pop() {
            mask |= 1 << v;
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        comps.push(mask);
    }
    comps
}

/// Zero-count subsets (size >= 2) of a chained component, found by
/// enumerating its subsets with antitone pruning. A perfect component yields
/// the empty set.
pub fn missing_terms(
    stats: &mut NodeStats,
    component: SubsetMask,
) -> Result<MissingTerms, ClassifyError> {
    let size = component.count_ones() as usize;
    if size > stats.cap() {
        return Err(StatsError::CapExceeded {
            fanout: size,
            cap: stats.cap(),
        }
        .into());
    }
    let mut me = BTreeSet::new();
    let members = mask_members(component);
    // Enumerate in increasing subset size so zero pruning sees subsets first.
    for size_want in 2..=size {
        enumerate_subsets(&members, size_want, &mut |mask| {
            let zero_sub = me.iter().any(|&z: &u64| z & mask == z);
            let count = if zero_sub { 0 } else { stats.materialize(mask) };
            if count == 0 {
                me.insert(mask);
            }
        });
    }
    Ok(MissingTerms { subsets: me })
}

fn enumerate_subsets(members: &[usize], size: usize, f: &mut impl FnMut(SubsetMask)) {
    fn rec(
        members: &[usize],
        size: usize,
        start: usize,
        mask: SubsetMask,
        f: &mut impl FnMut(SubsetMask),
    ) {
        if size == 0 {
            f(mask);
            return;
        }
        for i in start..members.len() {
            rec(members, size - 1, i + 1, mask | 1 << members[i], f);
        }
    }
    rec(members, size, 0, 0, f);
}

/// Classifies one node's observation, returning the class, the partition
/// structure, and the missing terms of every chained component.
pub fn classify_node(
    stats: &mut NodeStats,
) -> Result<(DataClass, PartitionStructure, MissingTerms), ClassifyError> {
    if stats.nk1 == 0 {
        return Err(ClassifyError::EmptyObservation(stats.node.clone()));
    }
    let adj = intersection_graph(stats);
    let comp_masks = connected_components(&adj);
    let mut components = Vec::with_capacity(comp_masks.len());
    let mut me = MissingTerms::default();
    for mask in comp_masks {
        let kind = if mask.count_ones() == 1 {
            ComponentKind::Singleton
        } else if stats.materialize(mask) > 0 {
            ComponentKind::Perfect
        } else {
            let sub = missing_terms(stats, mask)?;
            me.subsets.extend(sub.subsets);
            ComponentKind::Chained
        };
        components.push(Component { mask, kind });
    }
    let multi = components.iter().filter(|c| c.size() >= 2).count();
    let chained = components.iter().any(|c| c.kind == ComponentKind::Chained);
    let class = if multi == 0 {
        DataClass::CompleteExclusion
    } else if components.len() == 1 {
        if chained {
            DataClass::ChainedOnly
        } else {
            DataClass::Perfect
        }
    } else if chained {
        DataClass::ChainedPartition
    } else {
        DataClass::PartitionOnly
    };
    Ok((class, PartitionStructure { components }, me))
}

/// Renders one `classify` report line:
/// `<node> <class> components=[{a,b},{c}] m_e=[{a,c}]`.
pub fn report_line(
    stats: &NodeStats,
    class: DataClass,
    parts: &PartitionStructure,
    me: &MissingTerms,
) -> String {
    let fmt_set = |mask: SubsetMask| {
        let names: Vec<&str> = mask_members(mask)
            .into_iter()
            .map(|j| stats.children[j].as_str())
            .collect();
        format!("{{{}}}", names.join(","))
    };
    let comps: Vec<String> = parts.components.iter().map(|c| fmt_set(c.mask)).collect();
    let mes: Vec<String> = me.subsets.iter().map(|&m| fmt_set(m)).collect();
    format!(
        "{} {} components=[{}] m_e=[{}]",
        stats.node,
        class.as_str(),
        comps.join(","),
        mes.join(",")
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitset::ProbeSet;

    /// Builds NodeStats from per-probe lists of observing children.
    pub(crate) fn stats_from_rows(rows: &[&[usize]], d: usize) -> NodeStats {
        let n = rows.len();
        let mut sets = vec![ProbeSet::new(n); d];
        for (i, seen) in rows.iter().enumerate() {
            for &j in *seen {
                sets[j].insert(i);
            }
        }
        let children = (0..d).map(|j| format!("c{j}")).collect();
        NodeStats::from_sets("k", children, sets, n as u64, 16).unwrap()
    }

    #[test]
    fn graph_shapes() {
        // path a-b-c
        let stats = stats_from_rows(&[&[0, 1], &[1, 2], &[0], &[]], 3);
        let adj = intersection_graph(&stats);
        assert_eq!(adj[0], vec![1]);
        assert_eq!(adj[1], vec![0, 2]);
        assert_eq!(adj[2], vec![1]);

        // all pairwise zero
        let stats = stats_from_rows(&[&[0], &[1], &[2]], 3);
        let adj = intersection_graph(&stats);
        assert!(adj.iter().all(|a| a.is_empty()));

        // complete graph
        let stats = stats_from_rows(&[&[0, 1, 2]], 3);
        let adj = intersection_graph(&stats);
        assert_eq!(adj[0], vec![1, 2]);
    }

    #[test]
    fn partition_only_two_components() {
        // I({a,b})>0, I({a,c})=0, I({b,c})=0
        let mut stats = stats_from_rows(&[&[0, 1], &[2], &[0]], 3);
        let (class, parts, me) = classify_node(&mut stats).unwrap();
        assert_eq!(class, DataClass::PartitionOnly);
        let masks: Vec<SubsetMask> = parts.components.iter().map(|c| c.mask).collect();
        assert_eq!(masks, vec![0b011, 0b100]);
        assert_eq!(parts.components[0].kind, ComponentKind::Perfect);
        assert_eq!(parts.components[1].kind, ComponentKind::Singleton);
        assert!(me.is_empty());
    }

    #[test]
    fn chained_only_chain_abc() {
        // a-b, b-c positive, a-c zero, abc zero
        let mut stats = stats_from_rows(&[&[0, 1], &[1, 2], &[0]], 3);
        let (class, parts, me) = classify_node(&mut stats).unwrap();
        assert_eq!(class, DataClass::ChainedOnly);
        assert_eq!(parts.components.len(), 1);
        assert_eq!(parts.components[0].kind, ComponentKind::Chained);
        let expected: BTreeSet<SubsetMask> = [0b101u64, 0b111].into_iter().collect();
        assert_eq!(me.subsets, expected);
    }

    #[test]
    fn two_perfect_pairs() {
        let mut stats = stats_from_rows(&[&[0, 1], &[2, 3]], 4);
        let (class, parts, _) = classify_node(&mut stats).unwrap();
        assert_eq!(class, DataClass::PartitionOnly);
        assert_eq!(parts.components.len(), 2);
        assert!(parts
            .components
            .iter()
            .all(|c| c.kind == ComponentKind::Perfect));
    }

    #[test]
    fn complete_exclusion_all_singletons() {
        let mut stats = stats_from_rows(&[&[0], &[1], &[2]], 3);
        let (class, parts, _) = classify_node(&mut stats).unwrap();
        assert_eq!(class, DataClass::CompleteExclusion);
        assert!(parts
            .components
            .iter()
            .all(|c| c.kind == ComponentKind::Singleton));
    }

    #[test]
    fn empty_observation_is_an_error() {
        let mut stats = stats_from_rows(&[&[], &[]], 2);
        assert!(matches!(
            classify_node(&mut stats),
            Err(ClassifyError::EmptyObservation(_))
        ));
    }

    #[test]
    fn four_chain_missing_terms() {
        // consecutive pairs positive, everything else zero
        let mut stats = stats_from_rows(&[&[0, 1], &[1, 2], &[2, 3]], 4);
        let (class, _, me) = classify_node(&mut stats).unwrap();
        assert_eq!(class, DataClass::ChainedOnly);
        // non-consecutive pairs
        for pair in [0b0101u64, 0b1001, 0b1010] {
            assert!(me.subsets.contains(&pair), "pair {pair:b}");
        }
        // all triples and the quad
        for m in [0b0111u64, 0b1011, 0b1101, 0b1110, 0b1111] {
            assert!(me.subsets.contains(&m), "subset {m:b}");
        }
        assert_eq!(me.subsets.len(), 8);
    }

    #[test]
    fn missing_terms_of_perfect_component_is_empty() {
        let mut stats = stats_from_rows(&[&[0, 1, 2]], 3);
        let me = missing_terms(&mut stats, 0b111).unwrap();
        assert!(me.is_empty());
    }

    #[test]
    fn chained_perfect_mix() {
        // component {a,b,c} chained (a-b, b-c), component {d,e} perfect
        let mut stats = stats_from_rows(&[&[0, 1], &[1, 2], &[3, 4]], 5);
        let (class, parts, me) = classify_node(&mut stats).unwrap();
        assert_eq!(class, DataClass::ChainedPartition);
        assert_eq!(parts.components.len(), 2);
        assert_eq!(parts.components[0].kind, ComponentKind::Chained);
        assert_eq!(parts.components[1].kind, ComponentKind::Perfect);
        assert_eq!(me.within(0b00111), vec![0b00101, 0b00111]);
        assert!(me.within(0b11000).is_empty());
    }

    #[test]
    fn report_line_format() {
        let mut stats = stats_from_rows(&[&[0, 1], &[2], &[0]], 3);
        let (class, parts, me) = classify_node(&mut stats).unwrap();
        let line = report_line(&stats, class, &parts, &me);
        assert_eq!(line, "k partition-only components=[{c0,c1},{c2}] m_e=[]");
    }
}
