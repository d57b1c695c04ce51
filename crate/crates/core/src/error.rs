use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabError {
    #[error("matrix is not symmetric (asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("matrix is not positive definite (min eigenvalue {min_eigenvalue:.3e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },
    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:.3e})")]
    NotPositiveSemidefinite { min_eigenvalue: f64 },
    #[error("matrix is numerically singular")]
    SingularMatrix,
    #[error("iteration did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("invalid step: {0}")]
    InvalidStep(String),
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("not a graph Laplacian: {0}")]
    NotLaplacian(String),
    #[error("graph is disconnected: λ₂ = {lambda2}")]
    Disconnected { lambda2: f64 },
    #[error("not a stochastic matrix: {0}")]
    NotStochastic(String),
    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("unsupported combination: {0}")]
    UnsupportedCombination(String),
    #[error("step size too large: requires {condition} (γ = {gamma}, limit = {limit})")]
    StepTooLarge {
        condition: &'static str,
        gamma: f64,
        limit: f64,
    },
    #[error("insufficient samples: {have} < {need}")]
    InsufficientSamples { have: usize, need: usize },
    #[error("non-positive value in order fit: {0}")]
    NonPositive(f64),
    #[error("need at least {need} points, got {have}")]
    TooFewPoints { have: usize, need: usize },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for LabError {
    fn from(e: std::io::Error) -> Self {
        LabError::Io(e.to_string())
    }
}

impl From<csv::Error> for LabError {
    fn from(e: csv::Error) -> Self {
        LabError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
