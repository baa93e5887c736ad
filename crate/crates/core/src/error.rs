use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TagsError>;

#[derive(Debug, Error)]
pub enum TagsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible phantom geometry: {0}")]
    InfeasibleGeometry(String),

    #[error("prompt bank: {0}")]
    PromptBank(String),

    #[error("no lesion present in the mask; strategy-based point selection is impossible")]
    NoLesion,

    #[error("point ({z}, {y}, {x}) lies outside volume of extent {extent:?}")]
    PointOutOfBounds {
        z: usize,
        y: usize,
        x: usize,
        extent: [usize; 3],
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config hash mismatch: checkpoint has {found}, expected {expected}")]
    ConfigHashMismatch { expected: String, found: String },

    #[error("unsupported file format: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl TagsError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TagsError::Io {
            path: path.into(),
            source,
        }
    }
}
