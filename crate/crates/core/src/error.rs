use std::path::PathBuf;

use izoo_autograd::AutogradError;
use thiserror::Error;

use crate::inrz::FormatError;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite loss at iteration {iteration} (lr {lr:e})")]
    NonFiniteLoss { iteration: usize, lr: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec: {0}")]
    Image(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
