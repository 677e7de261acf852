//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("tape already consumed by backward()")]
    TapeSpent,
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("remote reward error: {0}")]
    Remote(String),
    #[error("reward protocol error: {0}")]
    Protocol(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
