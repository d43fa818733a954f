use glauber_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("non-finite loss {value} at step {step}")]
    NonFinite { step: usize, value: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("time conditioning: {0}")]
    Time(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = NetError> = std::result::Result<T, E>;

impl From<NetError> for CoreError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Core(c) => c,
            other => CoreError::Model(other.to_string()),
        }
    }
}
