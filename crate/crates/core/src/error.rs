use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("index {index} out of range 1..={len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("lower-level Hessian is not positive definite")]
    NotPositiveDefinite,

    #[error("problem does not provide {0}")]
    MissingEvaluator(&'static str),

    #[error("batch of {size} query points exceeds oracle capacity {capacity}")]
    BatchTooLarge { size: usize, capacity: usize },

    #[error("inner solve stalled at residual {residual:e} after {iterations} iterations")]
    InnerSolveFailed { residual: f64, iterations: usize },

    #[error("embedding basis is not orthonormal (max deviation {0:e})")]
    NonOrthonormal(f64),

    #[error("objective failed the convexity secant test")]
    NotConvex,

    #[error("algorithm bypassed the oracle: reported {reported} queries, oracle saw {observed}")]
    OracleBypass { reported: u64, observed: u64 },

    #[error("solver configuration invalid: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
