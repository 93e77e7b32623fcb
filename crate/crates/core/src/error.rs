use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of its valid range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An operation was called with inputs violating its preconditions.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A mask with no positive voxels was passed where a region was required.
    /// The caller may fall back to the full volume.
    #[error("degenerate mask: no positive voxels (full-volume fallback available: {fallback})")]
    DegenerateMask { fallback: bool },

    /// A probability group had no positive mass.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A non-finite value was produced during a numeric routine.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("storage error at {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn storage(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Storage {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $kind:ident, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$kind(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
