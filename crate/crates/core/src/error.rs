use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum LneError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("degenerate problem: {0}")]
    Degenerate(String),

    #[error("corrupt data in {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
}

impl LneError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LneError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the filesystem or on-disk data rather than the computation.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            LneError::Io { .. }
                | LneError::MissingFile(_)
                | LneError::Corrupt { .. }
                | LneError::Manifest { .. }
                | LneError::Version { .. }
        )
    }
}

pub type Result<T, E = LneError> = std::result::Result<T, E>;
