//! Loss tomography for multicast probing: infer per-link loss rates of a
//! network from end-to-end receiver observations.
//!
//! The crate simulates seeded Bernoulli probing over tree and multi-source
//! topologies, computes intersection statistics over descendant subsets,
//! classifies each node's observation into the data classes that decide
//! which likelihood equation is valid, and solves the class-matched equation
//! for the maximum-likelihood path pass rate. A brute-force grid oracle
//! validates every solver on small instances.
//!
//! The guide in `book/` walks through the concepts; its code snippets compile
//! and run as part of `cargo test --doc`.

pub mod bitset;
pub mod classifier;
pub mod cli;
pub mod estimators;
pub mod multisource;
pub mod oracle;
pub mod simulator;
pub mod statistics;
pub mod topology;

pub use classifier::{classify_node, DataClass, MissingTerms, PartitionStructure};
pub use estimators::{
    estimate_node, estimate_tree, Estimate, EstimatorError, LinkEstimate, SolverOptions,
    TreeEstimates,
};
pub use multisource::{classify_joint, decompose, estimate_general, JointEstimate, MultiObsClass};
pub use oracle::{exact_loglik, exhaustive_subset_counts, grid_mle, GridSpec};
pub use simulator::{simulate_general, simulate_tree, ObservationMatrix};
pub use statistics::{pooled_stats, NodeStats, ReachIndicators};
pub use topology::{GeneralTopology, LinkParams, MulticastTree, NodeKind};

// The book's code fences double as doc-tests so the guide can never drift
// from the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/topologies.md")]
    mod topologies {}
    #[doc = include_str!("../../../book/src/probing.md")]
    mod probing {}
    #[doc = include_str!("../../../book/src/counting.md")]
    mod counting {}
    #[doc = include_str!("../../../book/src/data-classes.md")]
    mod data_classes {}
    #[doc = include_str!("../../../book/src/estimation.md")]
    mod estimation {}
    #[doc = include_str!("../../../book/src/multi-source.md")]
    mod multi_source {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
