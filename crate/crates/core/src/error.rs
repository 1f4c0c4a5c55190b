use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate gaussian: {0}")]
    DegenerateGaussian(String),

    #[error("invalid depth {0} (must be positive)")]
    InvalidDepth(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged at {phase} iteration {iteration}: {detail}")]
    Diverged {
        phase: String,
        iteration: usize,
        detail: String,
    },

    #[error("pruning would remove {removed} of {total} gaussians")]
    PruneEverything { removed: usize, total: usize },

    #[error("dataset error in {path}: {detail}")]
    Dataset { path: PathBuf, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint version {found} is not supported (this build reads version {supported})")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dataset(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Dataset {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
