use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = McdError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum McdError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unrecognized format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("sample {sample_id}: invalid {field}: {reason}")]
    InvalidSample {
        sample_id: String,
        field: &'static str,
        reason: String,
    },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("{split} split is empty")]
    EmptySplit { split: String },
    #[error("label {label} out of range for {classes} answer classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("no ground truth for sample {sample_id}")]
    MissingTruth { sample_id: String },
    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl McdError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Self::Json {
            path: path.into(),
            source,
        }
    }
}
