//! Probing topologies: multicast trees and multi-source general networks.
//!
//! Topologies are immutable after construction and safe to share across
//! threads. The text format is line oriented:
//!
//! ```text
//! # comment
//! source s1
//! link <id> <parent> <child> [<pass_rate>]
//! ```
//!
//! In a tree the link id must equal its child node id (links and non-root
//! nodes are in 1-to-1 correspondence). General topologies carry their own
//! link ids because a node may have several parents.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown node id: {0}")]
    UnknownNode(String),
    #[error("duplicate link id: {0}")]
    DuplicateLink(String),
    #[error("multi-root: found {0} parentless non-source nodes, expected exactly one root")]
    MultiRoot(usize),
    #[error("cycle detected through node {0}")]
    Cycle(String),
    #[error("multi-parent: node {0} has more than one parent in a tree")]
    MultiParent(String),
    #[error("root-with-multiple-children: root {0} has {1} children, expected exactly 1")]
    RootWithMultipleChildren(String, usize),
    #[error("childless-internal-node: {0} is neither the root nor a receiver yet has no children")]
    ChildlessInternalNode(String),
    #[error("tree link id {id} does not equal its child node {child}")]
    LinkIdMismatch { id: String, child: String },
    #[error("source {0} is not a node of the topology")]
    UnknownSource(String),
    #[error("source {0} must have exactly one child, found {1}")]
    SourceChildCount(String, usize),
    #[error("source {0} must not have a parent")]
    SourceWithParent(String),
    #[error("node {0} is unreachable from every source")]
    Unreachable(String),
    #[error("pass rate {rate} for link {link} is outside (0, 1]")]
    InvalidPassRate { link: String, rate: f64 },
    #[error("link {0} has no pass rate")]
    MissingPassRate(String),
    #[error("topology has no links")]
    Empty,
}

/// How a node of a general topology relates to the probing sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    /// One parent, probes from a single source.
    Single,
    /// More than one parent.
    Joint,
    /// One parent but probes from several sources.
    Shared,
    /// A probing source.
    Source,
}

impl NodeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            NodeKind::Single => "single",
            NodeKind::Joint => "joint",
            NodeKind::Shared => "shared",
            NodeKind::Source => "source",
        }
    }
}

/// One directed link of a topology.
#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub id: String,
    pub parent: usize,
    pub child: usize,
    pub pass_rate: Option<f64>,
}

/// A directed acyclic probing topology with one or more sources.
///
/// Node and link lookups resolve through dense indices; `S(i)` (the set of
/// sources whose probes can reach node `i`) is precomputed at construction.
#[derive(Debug, Clone)]
pub struct GeneralTopology {
    names: Vec<String>,
    index: HashMap<String, usize>,
    links: Vec<Link>,
    /// Per node: (parent node, link index) pairs.
    parents: Vec<Vec<(usize, usize)>>,
    /// Per node: (child node, link index) pairs ordered by child id.
    children: Vec<Vec<(usize, usize)>>,
    sources: Vec<usize>,
    receivers: Vec<usize>,
    /// S(i): per node, the sorted set of source indices that can reach it.
    reach_sources: Vec<Vec<usize>>,
    /// Receivers below each node (including the node itself when a leaf),
    /// as indices into `receivers`.
    subtree_receivers: Vec<Vec<usize>>,
    topo_order: Vec<usize>,
}

impl GeneralTopology {
    /// Builds a topology from explicit records. `links` are
    /// `(id, parent, child, pass_rate)`; `sources` name the probing sources.
    pub fn from_records(
        links: &[(String, String, String, Option<f64>)],
        sources: &[String],
    ) -> Result<Self, TopologyError> {
        if links.is_empty() {
            return Err(TopologyError::Empty);
        }
        let mut names: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let intern = |name: &str, names: &mut Vec<String>, index: &mut HashMap<String, usize>| {
            *index.entry(name.to_string()).or_insert_with(|| {
                names.push(name.to_string());
                names.len() - 1
            })
        };
        let mut link_ids = BTreeSet::new();
        let mut built = Vec::with_capacity(links.len());
        for (id, parent, child, rate) in links {
            if !link_ids.insert(id.clone()) {
                return Err(TopologyError::DuplicateLink(id.clone()));
            }
            if let Some(r) = rate {
                if !(*r > 0.0 && *r <= 1.0) {
                    return Err(TopologyError::InvalidPassRate {
                        link: id.clone(),
                        rate: *r,
                    });
                }
            }
            let p = intern(parent, &mut names, &mut index);
            let c = intern(child, &mut names, &mut index);
            built.push(Link {
                id: id.clone(),
                parent: p,
                child: c,
                pass_rate: *rate,
            });
        }
        let n = names.len();
        let mut parent_adj = vec![Vec::new(); n];
        let mut child_adj = vec![Vec::new(); n];
        for (li, l) in built.iter().enumerate() {
            parent_adj[l.child].push((l.parent, li));
            child_adj[l.parent].push((l.child, li));
        }
        for adj in &mut child_adj {
            adj.sort_by(|a, b| names[a.0].cmp(&names[b.0]));
        }

        let mut source_ix = Vec::new();
        for s in sources {
            let &ix = index
                .get(s)
                .ok_or_else(|| TopologyError::UnknownSource(s.clone()))?;
            if !source_ix.contains(&ix) {
                source_ix.push(ix);
            }
        }
        // A bare tree file may omit the source line; infer the unique
        // parentless node.
        if source_ix.is_empty() {
            let roots: Vec<usize> = (0..n).filter(|&v| parent_adj[v].is_empty()).collect();
            if roots.len() != 1 {
                return Err(TopologyError::MultiRoot(roots.len()));
            }
            source_ix = roots;
        }
        source_ix.sort_by(|a, b| names[*a].cmp(&names[*b]));

        for &s in &source_ix {
            if !parent_adj[s].is_empty() {
                return Err(TopologyError::SourceWithParent(names[s].clone()));
            }
            if child_adj[s].len() != 1 {
                return Err(TopologyError::SourceChildCount(
                    names[s].clone(),
                    child_adj[s].len(),
                ));
            }
        }
        let roots: Vec<usize> = (0..n).filter(|&v| parent_adj[v].is_empty()).collect();
        for r in &roots {
            if !source_ix.contains(r) {
                // A parentless node that is not declared a source is a stray
                // root; for single-root files it was inferred above.
                return Err(TopologyError::MultiRoot(roots.len()));
            }
        }

        // Kahn topological order; leftover nodes sit on a cycle.
        let mut indeg: Vec<usize> = (0..n).map(|v| parent_adj[v].len()).collect();
        let mut queue: Vec<usize> = source_ix.clone();
        let mut topo_order = Vec::with_capacity(n);
        let mut head = 0;
        while head < queue.len() {
            let v = queue[head];
            head += 1;
            topo_order.push(v);
            for &(c, _) in &child_adj[v] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    queue.push(c);
                }
            }
        }
        if topo_order.len() != n {
            let stuck = (0..n)
                .find(|v| !topo_order.contains(v))
                .expect("cycle node");
            return Err(TopologyError::Cycle(names[stuck].clone()));
        }

        // S(i) by forward propagation along the topological order.
        let mut reach: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for (si, &s) in source_ix.iter().enumerate() {
            reach[s].insert(si);
        }
        for &v in &topo_order {
            let own: Vec<usize> = reach[v].iter().copied().collect();
            for &(c, _) in &child_adj[v] {
                reach[c].extend(own.iter().copied());
            }
        }
        for v in 0..n {
            if reach[v].is_empty() {
                return Err(TopologyError::Unreachable(names[v].clone()));
            }
        }

        let mut receivers: Vec<usize> = (0..n).filter(|&v| child_adj[v].is_empty()).collect();
        receivers.sort_by(|a, b| names[*a].cmp(&names[*b]));
        let recv_col: HashMap<usize, usize> =
            receivers.iter().enumerate().map(|(c, &v)| (v, c)).collect();

        // Receivers below each node, by reverse topological order.
        let mut below: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for &v in topo_order.iter().rev() {
            if let Some(&col) = recv_col.get(&v) {
                below[v].insert(col);
            }
            let mut acc = BTreeSet::new();
            for &(c, _) in &child_adj[v] {
                acc.extend(below[c].iter().copied());
            }
            below[v].extend(acc);
        }

        Ok(GeneralTopology {
            names,
            index,
            links: built,
            parents: parent_adj,
            children: child_adj,
            sources: source_ix,
            receivers,
            reach_sources: reach.into_iter().map(|s| s.into_iter().collect()).collect(),
            subtree_receivers: below.into_iter().map(|s| s.into_iter().collect()).collect(),
            topo_order,
        })
    }

    /// Parses the line-oriented text format.
    pub fn parse(text: &str) -> Result<Self, TopologyError> {
        let mut links = Vec::new();
        let mut sources = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            match toks[0] {
                "link" => {
                    if toks.len() != 4 && toks.len() != 5 {
                        return Err(TopologyError::Parse {
                            line: lineno + 1,
                            msg: format!(
                                "expected `link <id> <parent> <child> [<pass_rate>]`, got {line:?}"
                            ),
                        });
                    }
                    let rate = if toks.len() == 5 {
                        Some(toks[4].parse::<f64>().map_err(|e| TopologyError::Parse {
                            line: lineno + 1,
                            msg: format!("bad pass rate {:?}: {e}", toks[4]),
                        })?)
                    } else {
                        None
                    };
                    links.push((
                        toks[1].to_string(),
                        toks[2].to_string(),
                        toks[3].to_string(),
                        rate,
                    ));
                }
                "source" => {
                    if toks.len() != 2 {
                        return Err(TopologyError::Parse {
                            line: lineno + 1,
                            msg: format!("expected `source <node>`, got {line:?}"),
                        });
                    }
                    sources.push(toks[1].to_string());
                }
                other => {
                    return Err(TopologyError::Parse {
                        line: lineno + 1,
                        msg: format!("unknown record {other:?}"),
                    });
                }
            }
        }
        Self::from_records(&links, &sources)
    }

    /// Serializes to the text format in canonical order (sources sorted by
    /// id, then links sorted by id). `parse(serialize(t))` reconstructs `t`
    /// exactly: f64 rates print in shortest round-trip form.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for &s in &self.sources {
            let _ = writeln!(out, "source {}", self.names[s]);
        }
        let mut links: Vec<&Link> = self.links.iter().collect();
        links.sort_by(|a, b| a.id.cmp(&b.id));
        for l in links {
            match l.pass_rate {
                Some(r) => {
                    let _ = writeln!(
                        out,
                        "link {} {} {} {}",
                        l.id, self.names[l.parent], self.names[l.child], r
                    );
                }
                None => {
                    let _ = writeln!(
                        out,
                        "link {} {} {}",
                        l.id, self.names[l.parent], self.names[l.child]
                    );
                }
            }
        }
        out
    }

    pub fn node_count(&self) -> usize {
        self.names.len()
    }

    pub fn node_name(&self, ix: usize) -> &str {
        &self.names[ix]
    }

    pub fn node_index(&self, name: &str) -> Result<usize, TopologyError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| TopologyError::UnknownNode(name.to_string()))
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    /// Source node indices, sorted by id.
    pub fn sources(&self) -> &[usize] {
        &self.sources
    }

    /// Receiver node indices, sorted by id. Column `c` of an observation
    /// matrix refers to `receivers()[c]`.
    pub fn receivers(&self) -> &[usize] {
        &self.receivers
    }

    pub fn receiver_names(&self) -> Vec<&str> {
        self.receivers
            .iter()
            .map(|&v| self.names[v].as_str())
            .collect()
    }

    /// Children of a node as (child node, link index), ordered by child id.
    pub fn children(&self, node: usize) -> &[(usize, usize)] {
        &self.children[node]
    }

    pub fn parents(&self, node: usize) -> &[(usize, usize)] {
        &self.parents[node]
    }

    /// S(i): sorted indices into `sources()` whose probes can reach `node`.
    pub fn sources_reaching(&self, node: usize) -> &[usize] {
        &self.reach_sources[node]
    }

    /// Receiver columns observable below `node` (the node's own column when it
    /// is a receiver).
    pub fn receiver_cols_below(&self, node: usize) -> &[usize] {
        &self.subtree_receivers[node]
    }

    pub fn topo_order(&self) -> &[usize] {
        &self.topo_order
    }

    /// Classifies every node as single, joint, shared, or source.
    pub fn classify_nodes(&self) -> BTreeMap<String, NodeKind> {
        (0..self.node_count())
            .map(|v| (self.names[v].clone(), self.node_kind(v)))
            .collect()
    }

    pub fn node_kind(&self, v: usize) -> NodeKind {
        if self.sources.contains(&v) {
            NodeKind::Source
        } else if self.parents[v].len() >= 2 {
            NodeKind::Joint
        } else if self.reach_sources[v].len() >= 2 {
            NodeKind::Shared
        } else {
            NodeKind::Single
        }
    }

    /// Joint nodes (more than one parent), sorted by id.
    pub fn joint_nodes(&self) -> Vec<usize> {
        let mut v: Vec<usize> = (0..self.node_count())
            .filter(|&v| self.parents[v].len() >= 2)
            .collect();
        v.sort_by(|a, b| self.names[*a].cmp(&self.names[*b]));
        v
    }
}

/// A single-source multicast tree. The root has exactly one child and link
/// ids coincide with child node ids.
#[derive(Debug, Clone)]
pub struct MulticastTree {
    topo: GeneralTopology,
    root: usize,
}

impl MulticastTree {
    pub fn from_records(
        links: &[(String, String, String, Option<f64>)],
        sources: &[String],
    ) -> Result<Self, TopologyError> {
        let topo = GeneralTopology::from_records(links, sources).map_err(Self::tree_error)?;
        Self::from_topology(topo)
    }

    // In a tree the source is the root, so the shared source-fan-out check
    // reads as the root-child invariant.
    fn tree_error(e: TopologyError) -> TopologyError {
        match e {
            TopologyError::SourceChildCount(root, n) => {
                TopologyError::RootWithMultipleChildren(root, n)
            }
            other => other,
        }
    }

    /// Validates the tree invariants over an already-built topology.
    pub fn from_topology(topo: GeneralTopology) -> Result<Self, TopologyError> {
        if topo.sources.len() != 1 {
            return Err(TopologyError::MultiRoot(topo.sources.len()));
        }
        let root = topo.sources[0];
        for v in 0..topo.node_count() {
            if v == root {
                continue;
            }
            if topo.parents[v].len() > 1 {
                return Err(TopologyError::MultiParent(topo.names[v].clone()));
            }
        }
        if topo.children[root].len() != 1 {
            return Err(TopologyError::RootWithMultipleChildren(
                topo.names[root].clone(),
                topo.children[root].len(),
            ));
        }
        for l in &topo.links {
            if l.id != topo.names[l.child] {
                return Err(TopologyError::LinkIdMismatch {
                    id: l.id.clone(),
                    child: topo.names[l.child].clone(),
                });
            }
        }
        Ok(MulticastTree { topo, root })
    }

    pub fn parse(text: &str) -> Result<Self, TopologyError> {
        Self::from_topology(GeneralTopology::parse(text).map_err(Self::tree_error)?)
    }

    pub fn serialize(&self) -> String {
        self.topo.serialize()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn topology(&self) -> &GeneralTopology {
        &self.topo
    }

    /// Parent of a non-root node.
    pub fn parent(&self, node: usize) -> Option<usize> {
        self.topo.parents[node].first().map(|&(p, _)| p)
    }

    /// R(k): receiver ids attached to the subtree below `node` (the node
    /// itself when it is a leaf).
    pub fn subtree_receivers(&self, node: &str) -> Result<BTreeSet<String>, TopologyError> {
        let ix = self.topo.node_index(node)?;
        Ok(self
            .topo
            .receiver_cols_below(ix)
            .iter()
            .map(|&c| self.topo.names[self.topo.receivers[c]].clone())
            .collect())
    }

    /// Internal nodes (at least one child), root excluded, in topological
    /// order.
    pub fn internal_nodes(&self) -> Vec<usize> {
        self.topo
            .topo_order
            .iter()
            .copied()
            .filter(|&v| v != self.root && !self.topo.children[v].is_empty())
            .collect()
    }
}

/// Checks all tree invariants on a parsed record set, reporting the first
/// violation.
pub fn validate_tree(
    links: &[(String, String, String, Option<f64>)],
    sources: &[String],
) -> Result<(), TopologyError> {
    MulticastTree::from_records(links, sources).map(|_| ())
}

/// Per-link pass rates in (0, 1], keyed by link id.
///
/// A rate of exactly 0 is rejected: it makes the subtree below the link
/// unobservable and every downstream estimate degenerate.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkParams {
    rates: BTreeMap<String, f64>,
}

impl LinkParams {
    pub fn new(rates: BTreeMap<String, f64>) -> Result<Self, TopologyError> {
        for (link, &r) in &rates {
            if !(r > 0.0 && r <= 1.0) {
                return Err(TopologyError::InvalidPassRate {
                    link: link.clone(),
                    rate: r,
                });
            }
        }
        Ok(LinkParams { rates })
    }

    /// Extracts the rates embedded in a topology file; every link must carry
    /// one.
    pub fn from_topology(topo: &GeneralTopology) -> Result<Self, TopologyError> {
        let mut rates = BTreeMap::new();
        for l in &topo.links {
            let r = l
                .pass_rate
                .ok_or_else(|| TopologyError::MissingPassRate(l.id.clone()))?;
            rates.insert(l.id.clone(), r);
        }
        Self::new(rates)
    }

    pub fn uniform(topo: &GeneralTopology, rate: f64) -> Result<Self, TopologyError> {
        Self::new(topo.links.iter().map(|l| (l.id.clone(), rate)).collect())
    }

    pub fn rate(&self, link: &str) -> Option<f64> {
        self.rates.get(link).copied()
    }

    /// Loss rate `1 - pass_rate` of a link.
    pub fn loss_rate(&self, link: &str) -> Option<f64> {
        self.rate(link).map(|r| 1.0 - r)
    }
}
