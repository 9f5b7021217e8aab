use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PvqaeError>;

#[derive(Debug, Error)]
pub enum PvqaeError {
    /// Invalid or inconsistent configuration (bad sizes, unknown keys, missing directories).
    #[error("config error: {0}")]
    Config(String),

    /// Data that violates an integrity contract (e.g. a defect image without a mask).
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Shape mismatch between tensors or grids.
    #[error("shape error: {0}")]
    Shape(String),

    /// A caller broke an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    /// A metric that is not defined for the given input (e.g. AUROC with one class).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PvqaeError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PvqaeError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line driver: 1 config/integrity, 2 I/O, 3 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            PvqaeError::Io { .. } | PvqaeError::Image { .. } => 2,
            PvqaeError::Divergence { .. } | PvqaeError::Numeric(_) => 3,
            _ => 1,
        }
    }
}
