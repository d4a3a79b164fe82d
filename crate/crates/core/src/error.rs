//! Crate-wide error type.
//!
//! Variants map onto the failure families surfaced by the CLI exit codes:
//! parameter/usage problems, data format problems, structural (shape)
//! problems, and numeric failures such as solver non-convergence.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid argument value (out of range, non-finite, degenerate).
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// API misuse (e.g. backward before forward, empty update mask).
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed input data; carries the offending file and location.
    #[error("format error in {path}{}: {detail}", location.as_deref().map(|l| format!(" at {l}")).unwrap_or_default())]
    Format {
        path: String,
        /// Byte offset or row number, when known.
        location: Option<String>,
        detail: String,
    },

    /// Inconsistent shapes or matrix structure (e.g. zero diagonal).
    #[error("structure error: {0}")]
    Structure(String),

    /// Numeric failure: divergence, non-convergence, non-finite values.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn format(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            location: None,
            detail: detail.into(),
        }
    }

    pub fn format_at(
        path: impl Into<String>,
        location: impl Into<String>,
        detail: impl Into<String>,
    ) -> Self {
        Error::Format {
            path: path.into(),
            location: Some(location.into()),
            detail: detail.into(),
        }
    }

    pub fn structure(msg: impl Into<String>) -> Self {
        Error::Structure(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
