//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("video source error: {0}")]
    Video(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("label space mismatch: {0}")]
    LabelSpace(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
