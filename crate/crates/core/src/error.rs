//! Error types shared across the pipeline.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset format error: {0}")]
    Format(String),

    #[error("missing upstream artifact: {0}")]
    MissingArtifact(String),

    #[error("world generation failed: {0}")]
    World(String),

    #[error("malformed plan: {0}")]
    MalformedPlan(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
