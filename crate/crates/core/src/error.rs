use std::path::PathBuf;

use cropformer_autodiff::{CheckpointError, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Out-of-range parameter or inconsistent configuration.
    #[error("invalid parameter: {0}")]
    Param(String),
    /// Malformed or unusable input data.
    #[error("data error: {0}")]
    Data(String),
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by configuration rather than data.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Param(_) | Error::Tensor(TensorError::Config(_)))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
