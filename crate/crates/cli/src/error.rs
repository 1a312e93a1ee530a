use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Numerical(egan_core::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {reason}", path.display())]
    Malformed { path: PathBuf, reason: String },
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Numerical(_) => 3,
            HarnessError::Io { .. } | HarnessError::Malformed { .. } => 4,
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn malformed(path: &Path, reason: impl Into<String>) -> Self {
        HarnessError::Malformed {
            path: path.to_path_buf(),
            reason: reason.into(),
        }
    }
}

impl From<egan_core::Error> for HarnessError {
    fn from(e: egan_core::Error) -> Self {
        if e.is_numerical() {
            HarnessError::Numerical(e)
        } else {
            HarnessError::Config(e.to_string())
        }
    }
}

pub(crate) fn config(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}
