use std::path::PathBuf;

use thiserror::Error;

use crate::nn::TinyNet;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("sample {sample}: {reason}")]
    Placement { sample: usize, reason: String },

    #[error("{points} points for K={k}{}; lower K", class.map(|c| format!(" in class {c}")).unwrap_or_default())]
    TooFewPoints {
        class: Option<usize>,
        points: usize,
        k: usize,
    },

    #[error("{0} mask is empty; surface distances are undefined")]
    EmptyMask(&'static str),

    #[error("sample {sample_id} has no structure ids; use the external mask oracle")]
    MissingStructure { sample_id: String },

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged {
        step: usize,
        loss: f64,
        last_good: Box<TinyNet>,
    },

    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
