use std::path::PathBuf;

use thiserror::Error;

/// Failures while reading or validating survey and location inputs.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("line {line}: field `{field}` out of range")]
    IndexOutOfRange { field: String, line: usize },
    #[error("line {line}: missing value for `{field}`")]
    MissingValue { field: String, line: usize },
    #[error("age {age} outside configured range [{min}, {max}]")]
    AgeOutOfRange { age: f64, min: f64, max: f64 },
    #[error("age span must be positive, got {0}")]
    NonpositiveSpan(f64),
    #[error("distance matrix {matrix}: entries ({row},{col}) and ({col},{row}) differ")]
    AsymmetricMatrix { matrix: usize, row: usize, col: usize },
    #[error("distance matrix {matrix}: nonzero diagonal at location {location}")]
    NonzeroDiagonal { matrix: usize, location: usize },
    #[error("distance matrix {matrix}: invalid entry at ({row},{col})")]
    InvalidDistance { matrix: usize, row: usize, col: usize },
    #[error("adjacency {from} -> {to} has no reverse edge or is invalid")]
    DanglingAdjacency { from: usize, to: usize },
    #[error("location {0} has no region assignment")]
    IncompletePartition(usize),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("matrix is not positive definite after jitter {jitter:e}")]
    NotPositiveDefinite { jitter: f64 },
    #[error("locations {0} and {1} are neighbours but one has zero degree")]
    ZeroDegreeNeighbor(usize, usize),
    #[error("distance kernel index {0} has no matching distance matrix")]
    MissingDistance(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("constraint violated: {0}")]
    ConstraintViolation(String),
    #[error("non-finite log density")]
    NonFiniteDensity,
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
    #[error("could not find a finite initial point for chain {0}")]
    NonFiniteDensity(usize),
    #[error("more than half of the iterations diverged in every chain")]
    AllChainsDiverged,
    #[error("need at least 4 draws per split chain, got {0}")]
    InsufficientDraws(usize),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("log-likelihood matrix needs at least 2 draws")]
    DegenerateDraws,
    #[error("tail of {tail} draws is too small for a Pareto fit")]
    TailTooSmall { tail: usize },
    #[error("reports cover different points")]
    MismatchedPoints,
    #[error("group {0} has no observations")]
    EmptyGroup(String),
    #[error("unknown profile field `{0}`")]
    UnknownProfileField(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("non-finite log-likelihood entry at draw {draw}, point {point}")]
    NonFinite { draw: usize, point: usize },
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("cohort/age design has no within-cohort age variation")]
    InsufficientCrossing,
    #[error("invalid simulation setting: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
