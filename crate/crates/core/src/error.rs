use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// An argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid experiment or game parameters, detected before any round runs.
    #[error("configuration error: {0}")]
    Config(String),

    /// predict/observe called out of order.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("grid index {index} out of range for m = {m}")]
    IndexOutOfRange { index: usize, m: usize },

    /// A runtime-checked mathematical invariant failed. Always a bug.
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
