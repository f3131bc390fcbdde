//! Desk-scale domain-generalization training toolkit.
//!
//! Trains a small transformer encoder with low-rank adapters on the
//! attention projections, either by pooled empirical risk minimization or
//! by a first-order meta-learning loop that splits source domains into
//! meta-train/meta-test sets each iteration. Ships a synthetic
//! multi-domain corpus generator, EER/DET scoring, and singular-value
//! analysis of the trained adapter factors.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod graph;
pub mod meta;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod runner;
pub mod svd;
pub mod tensor;

pub use graph::{AutodiffError, Graph, NodeId};
pub use params::{GradMap, ParamStore};
pub use tensor::Tensor;
