use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("position region has zero total weight")]
    DegenerateRegion,

    #[error("no instances left to merge")]
    NoInstances,

    #[error("segment {0:#010x} has no instance depth map")]
    MissingDepth(u32),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("{path}: bad raster container: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: truncated payload (expected {expected} bytes, found {found})")]
    Truncation {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("invalid `{field}`: {reason}")]
    Validation { field: String, reason: String },

    #[error("fit diverged: {0}")]
    Divergence(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by unreadable or malformed inputs, as opposed to
    /// inputs that are well-formed but inconsistent with each other.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Format { .. }
                | Error::Truncation { .. }
                | Error::Validation { .. }
                | Error::Io { .. }
                | Error::Json { .. }
        )
    }
}
