//! Crate-wide error type.
//!
//! Variants are grouped by failure domain so callers (CLI, FFI) can map them
//! to exit/status codes without string matching.

use thiserror::Error;

/// All failure modes surfaced by the crate.
#[derive(Debug, Error)]
pub enum EquimolError {
    /// Filesystem-level failure (open/read/write).
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input file (SDF, XYZ, valency table, checkpoint, ...).
    /// `location` is a human-readable position, e.g. "line 12" or
    /// "record 3, atom block".
    #[error("parse error in {what} ({location}): {message}")]
    Parse {
        what: String,
        location: String,
        message: String,
    },

    /// Invalid or inconsistent run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A caller violated an API contract (bad shape, unknown class index,
    /// non-centered coordinates where centered ones are required, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A numerically degenerate state that has no meaningful continuation
    /// (zero posterior normaliser, non-finite loss, ...).
    #[error("numerical degeneracy: {0}")]
    Numerical(String),
}

impl EquimolError {
    /// Shorthand for I/O errors carrying the offending path.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        EquimolError::Io {
            path: path.into(),
            source,
        }
    }

    /// Shorthand for parse errors.
    pub fn parse(
        what: impl Into<String>,
        location: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        EquimolError::Parse {
            what: what.into(),
            location: location.into(),
            message: message.into(),
        }
    }
}
