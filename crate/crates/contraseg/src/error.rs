//! Crate-wide error type.

/// Errors surfaced by the pipeline, grouped by contract family.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("transfer error: {0}")]
    Transfer(String),
    #[error("policy error: {0}")]
    Policy(String),
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("checkpoint schema error: {0}")]
    Schema(String),
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
