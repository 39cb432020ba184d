//! Tree-based discovery of subgroups with heterogeneous prediction-model
//! performance, plus ensemble estimators of conditional performance and
//! methods for combining several prediction models into one.
//!
//! The pipeline: a fixed prediction model is evaluated per observation (or
//! per group for AUC), trees partition covariate space by performance
//! heterogeneity, pruning and cross-validation select a final subtree, and
//! forests/boosting give smooth conditional-performance estimates that can
//! drive weighted model combination.

pub mod combine;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod exec;
pub mod measures;
pub mod prune;
pub mod rng;
pub mod sim;
pub mod tree;

pub use data::Dataset;
pub use error::Error;
pub use measures::{Level, Measure, Orientation, SubgroupStats};
pub use tree::{GrowthConfig, SplitCriterion, Tree};

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
