use thiserror::Error;

/// Errors raised by chain, energy, oracle and loss routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoreError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("token {token} at position {position} outside vocabulary of size {size}")]
    TokenOutOfRange {
        position: usize,
        token: u32,
        size: usize,
    },
    #[error("distribution is not normalized: sum = {sum}")]
    NotNormalized { sum: f64 },
    #[error("distribution has a negative or non-finite entry at {index}: {value}")]
    InvalidProbability { index: usize, value: f64 },
    #[error("non-finite energy value: {0}")]
    NonFiniteEnergy(f64),
    #[error("step {step} outside 1..={total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("conditioning on a zero-probability event")]
    NullEvent,
    #[error("zero probability assigned to token {token} at index {index}")]
    ZeroProbability { index: usize, token: u32 },
    #[error("state space of {states} states exceeds the enumeration limit {limit}")]
    StateSpaceTooLarge { states: u128, limit: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("kernel evaluation failed at step {step}: {source}")]
    KernelFailure {
        step: usize,
        #[source]
        source: Box<CoreError>,
    },
    #[error("model error: {0}")]
    Model(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for CoreError {
    fn from(e: std::io::Error) -> Self {
        CoreError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CoreError {
    fn from(e: serde_json::Error) -> Self {
        CoreError::Io(e.to_string())
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
