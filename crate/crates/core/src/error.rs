use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PsatError>;

#[derive(Debug, Error)]
pub enum PsatError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("generation failed for organ {organ} (id {organ_id}): {reason}")]
    Generation {
        organ: String,
        organ_id: u16,
        reason: String,
    },

    #[error("subject {index}: {source}")]
    Subject {
        index: usize,
        #[source]
        source: Box<PsatError>,
    },

    #[error("fingerprint error: {0}")]
    Fingerprint(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("split leak: test case `{0}` was used for training")]
    SplitLeak(String),

    #[error("parse error at offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("report error: {0}")]
    Report(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PsatError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        PsatError::InvalidArgument(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        PsatError::Format {
            path: path.into(),
            message: msg.into(),
        }
    }
}
