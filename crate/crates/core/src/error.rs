use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::AutodiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("component mismatch: model expects {expected:?}, got {got:?}")]
    ComponentMismatch { expected: Vec<String>, got: Vec<String> },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("training diverged at step {step}: {what} is not finite")]
    Diverged { step: usize, what: &'static str },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("checksum mismatch for {path}")]
    Checksum { path: PathBuf },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::MissingFile(path);
        }
        Error::Io { path, source }
    }
}
