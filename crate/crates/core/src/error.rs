use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("metadata error: {0}")]
    Metadata(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate target: {0}")]
    DegenerateTarget(String),

    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),

    #[error("training diverged at epoch {epoch}, step {step}: {message}")]
    Divergence {
        epoch: usize,
        step: usize,
        message: String,
        record: Box<crate::trainer::StepRecord>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }
}
