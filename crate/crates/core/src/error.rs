use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged {
        step: usize,
        loss: f64,
        /// Last checkpoint taken before the diverging step.
        checkpoint: Option<Box<crate::training::Checkpoint>>,
    },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("ingestion failed: {0}")]
    Ingestion(String),

    #[error("missing checkpoint {path}; run `{hint}` first")]
    MissingCheckpoint { path: PathBuf, hint: String },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png: {0}")]
    Png(String),

    #[error("csv: {0}")]
    Csv(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
