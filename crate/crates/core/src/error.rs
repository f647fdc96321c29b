use thiserror::Error;

/// Errors shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite entry at row {row}, column {col}")]
    NonFiniteEntry { row: usize, col: usize },

    #[error("instance needs at least 3 columns, got {n}")]
    TooFewColumns { n: usize },

    #[error("subset size {s} outside 1..={n}")]
    SizeOutOfRange { s: usize, n: usize },

    #[error("h-function is not non-increasing near size {s}")]
    NotNonIncreasing { s: usize },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("direction requested from an empty basis")]
    EmptyBasis,

    #[error("no basis vector satisfies all class budgets at step {step}")]
    NoFeasibleDirection { step: usize },

    #[error("slack of row {row} is {slack} <= 0 at step {step}: barrier breached")]
    NonpositiveSlack { row: usize, slack: f64, step: usize },

    #[error("coordinate {coord} overshoots the cube (|x|={value}) at step {step}")]
    OvershootBound { coord: usize, value: f64, step: usize },

    #[error("subspace dimension {dim} < required {required} at step {step} (n_t={n_alive})")]
    DimensionLemmaViolated { step: usize, dim: usize, required: usize, n_alive: usize },

    #[error("step {step} still violates the potential budget after {retries} halvings")]
    StepBudgetExhausted { step: usize, retries: usize },

    #[error("intersection dimension {dim} < required {required} at step {step}")]
    IntersectionTooSmall { step: usize, dim: usize, required: usize },

    #[error("entry at row {row}, column {col} is not 0/1")]
    NotZeroOne { row: usize, col: usize },

    #[error("column {col} has degree {degree} > declared bound {k}")]
    ColumnDegreeExceeded { col: usize, degree: usize, k: usize },

    #[error("infeasible generator spec: {0}")]
    InfeasibleSpec(String),

    #[error("instance too large for exact enumeration: n={n} > {max}")]
    TooLarge { n: usize, max: usize },

    #[error("coordinate {coord} of the coloring is not +1/-1")]
    NotSignVector { coord: usize },

    #[error("quadrature failed: {0}")]
    QuadratureFailure(String),

    #[error("malformed instance data: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
