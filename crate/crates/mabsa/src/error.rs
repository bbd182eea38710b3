use std::io;
use std::path::{Path, PathBuf};

use mabsa_core::Error as CoreError;

pub type Result<T, E = AppError> = std::result::Result<T, E>;

/// Failures surfaced by the IO layer and the command line, each mapped to a
/// process exit code.
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    /// Bad flags, unusable config, or inputs that do not fit the model.
    #[error("{0}")]
    Usage(String),
    #[error("{path}: file not found")]
    Missing { path: PathBuf },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl AppError {
    /// 2 for usage, config, data and shape problems; 1 for failures at run
    /// time (IO, diverged training).
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) | AppError::Missing { .. } | AppError::Format { .. } => 2,
            AppError::Io { .. } => 1,
            AppError::Core(CoreError::Training(_)) => 1,
            AppError::Core(_) => 2,
        }
    }

    pub fn io(path: &Path, source: io::Error) -> Self {
        if source.kind() == io::ErrorKind::NotFound {
            AppError::Missing { path: path.to_path_buf() }
        } else {
            AppError::Io { path: path.to_path_buf(), source }
        }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        AppError::Format { path: path.to_path_buf(), message: message.into() }
    }
}

pub(crate) fn usage(msg: impl Into<String>) -> AppError {
    AppError::Usage(msg.into())
}
