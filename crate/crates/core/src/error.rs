//! Error types shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed CSV {path}: {reason}")]
    Csv { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors a caller should report as bad configuration rather
    /// than a runtime failure.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Json(_))
    }
}

/// Parse failures for IDX files. Every variant carries the byte offset where
/// the problem was detected.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("bad magic number 0x{found:08x} at byte offset {offset} (expected 0x{expected:08x})")]
    BadMagic { offset: usize, expected: u32, found: u32 },

    #[error("truncated file: needed {needed} bytes at byte offset {offset}, found {available}")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("count mismatch: {images} images but {labels} labels (header count at byte offset {offset})")]
    CountMismatch {
        offset: usize,
        images: usize,
        labels: usize,
    },

    #[error("label {label} out of range [0, 9] at byte offset {offset}")]
    LabelOutOfRange { offset: usize, label: u8 },
}
