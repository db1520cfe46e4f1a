use std::path::PathBuf;

use pirl_core::LabError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Invalid or missing configuration; every violation is listed.
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed artifact contents.
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    /// Two metrics files with different columns.
    #[error("schema mismatch: {0}")]
    Schema(String),

    /// A suite check did not hold.
    #[error("assertion failed: {0}")]
    Assertion(String),

    #[error(transparent)]
    Lab(#[from] LabError),
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::Config(vec![message.into()])
    }

    /// Process exit status: 1 assertion, 2 configuration, 3 IO.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Assertion(_) => 1,
            Self::Config(_) | Self::Schema(_) => 2,
            Self::Lab(LabError::Config(_) | LabError::Domain(_) | LabError::Parse(_)) => 2,
            Self::Lab(_) => 1,
            Self::Io { .. } | Self::Format { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
