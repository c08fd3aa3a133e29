use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Extents disagree on a named axis, or ranks do not line up.
    #[error("dimension error on axis `{axis}`: {detail}")]
    Dimension { axis: String, detail: String },

    /// A configuration violates a divisibility or range invariant.
    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An unknown operation name, bad argument reference or similar misuse.
    #[error("usage error: {0}")]
    Usage(String),

    /// The result is mathematically undefined for the given inputs.
    #[error("undefined input: {0}")]
    Undefined(String),

    /// A closed-form count disagreed with the instrumented executor.
    #[error("verification failure: {0}")]
    Verification(String),

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dim(axis: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Dimension {
            axis: axis.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
