use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed data: {0}")]
    Format(String),

    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("keys were generated against dataset {expected}, got {actual}")]
    StaleKeys { expected: String, actual: String },

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("registry is empty")]
    EmptyRegistry,

    #[error("registry changed on disk (expected version {expected}, found {found})")]
    VersionConflict { expected: u64, found: u64 },

    #[error("invalid JSON document: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Returns a contract error unless `a == b`.
pub(crate) fn ensure_dims(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Contract(format!(
            "{what}: dimension mismatch ({a} vs {b})"
        )));
    }
    Ok(())
}
