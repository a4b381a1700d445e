use std::io;
use std::path::PathBuf;

use fan_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FanError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

/// Coarse failure class, used by the command line to pick an exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
}

impl FanError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        FanError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            FanError::Config(_) | FanError::Argument(_) => ErrorCategory::Config,
            FanError::Tensor(TensorError::Config { .. }) => ErrorCategory::Config,
            FanError::Data(_) | FanError::Io { .. } | FanError::Format(_) => ErrorCategory::Data,
            FanError::Tensor(_) | FanError::Invariant(_) | FanError::Numeric(_) => ErrorCategory::Numeric,
        }
    }
}

pub type Result<T> = std::result::Result<T, FanError>;
