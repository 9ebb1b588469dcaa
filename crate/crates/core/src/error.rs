use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid probability matrix: {0}")]
    InvalidProbabilities(String),

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("unbalanced domain batch: {source_count} source vs {target_count} target samples")]
    UnbalancedBatch { source_count: usize, target_count: usize },

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("unsupported layer `{0}` for activation maps")]
    UnsupportedLayer(String),

    #[error("backbone `{0}` is not built in; supply it through ModelBundle::with_external_backbone")]
    BackboneUnavailable(String),

    #[error("empty data: {0}")]
    Empty(String),

    #[error("training diverged at step {step}: {message} (batch hash {batch_hash})")]
    Diverged {
        step: usize,
        message: String,
        batch_hash: String,
    },

    #[error("output directory {0} already exists; pass overwrite to replace it")]
    RunCollision(PathBuf),

    #[error("image error for {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
