use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("exponent {0} outside [1, inf)")]
    InvalidExponent(f64),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("empty set: {0}")]
    EmptySet(String),

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("unsupported tail rule: {0}")]
    UnsupportedTail(String),

    #[error("column sums of the coupling matrix diverge: {0}")]
    NonSummable(String),

    #[error("power iteration did not converge after {iterations} iterations (spread {spread:e})")]
    NoConvergence { iterations: usize, spread: f64 },

    #[error("certificate verification failed: {0}")]
    Verification(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
