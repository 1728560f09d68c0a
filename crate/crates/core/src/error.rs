use std::path::PathBuf;

use cisunet_tensor::TensorError;
use thiserror::Error;

use crate::config::ConfigError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Volume { path: PathBuf, msg: String },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("dataset {path}: {msg}")]
    Dataset { path: PathBuf, msg: String },
    #[error("non-finite loss {loss} at iteration {iteration}")]
    NonFiniteLoss { iteration: usize, loss: f64 },
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier for the error category, used in CLI output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Config(_) => "config",
            Error::Invalid { .. } => "invalid_input",
            Error::MissingParameter(_) => "missing_parameter",
            Error::Io { .. } => "io",
            Error::Volume { .. } => "volume",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Dataset { .. } => "dataset",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
        }
    }
}
