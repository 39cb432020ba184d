//! Error type shared by every module in the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("operation requires an individual-level measure, got a group-level one")]
    GroupLevelMeasure,

    #[error("subgroup of size {n} is below the minimum of {min} for this measure")]
    SubgroupTooSmall { n: usize, min: usize },

    #[error("dataset has {n} rows but at least {min} are required")]
    DatasetTooSmall { n: usize, min: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("measure is incompatible with this operation: {0}")]
    MeasureMismatch(String),

    #[error("combination weights sum to {sum}, not 1")]
    WeightSumViolation { sum: f64 },

    #[error("mixture component {component} degenerated (responsibility mass {mass:.3e})")]
    DegenerateComponent { component: usize, mass: f64 },

    #[error("Fisher scoring Hessian is singular even after ridge correction")]
    SingularHessian,

    #[error("need at least {min} rows, got {n}")]
    TooFewRows { n: usize, min: usize },

    #[error("row {row}, column {column}: cell is missing or not numeric")]
    ParseError { row: usize, column: String },

    #[error("column {0:?} not found in input")]
    MissingColumn(String),

    #[error("outcome at row {row} is {value}, expected 0 or 1 for this measure")]
    NonBinaryOutcome { row: usize, value: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("replicate {index} failed: {source}")]
    ReplicateFailed {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
