//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by model evaluation, curvature assembly, the theory
/// solvers, and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("matrix is not positive definite in {0}")]
    NotPositiveDefinite(&'static str),

    #[error("hypothesis violated: {0}")]
    HypothesisViolated(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("convexity violation: per-case loss Hessian has eigenvalue {min_eig:.3e}")]
    ConvexityViolation { min_eig: f64 },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("problem size {n} exceeds the desk-scale cap {cap}")]
    TooLarge { n: usize, cap: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            got,
        }
    }
}
