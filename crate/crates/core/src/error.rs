use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::AutodiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("token id {id} is outside the vocabulary of size {size}")]
    OutOfVocab { id: u32, size: usize },
    #[error("sequence of {len} positions exceeds the model maximum of {max}")]
    Overlong { len: usize, max: usize },
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("models are incompatible: {0}")]
    ModelMismatch(String),
    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("{strategy} needs at least {needed} hypotheses, got {got}")]
    TooFewHypotheses {
        strategy: String,
        needed: usize,
        got: usize,
    },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("malformed record at {path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("stage {stage} failed")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
