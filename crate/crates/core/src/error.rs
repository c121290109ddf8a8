//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CmcError {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A primitive produced a NaN or infinity.
    #[error("numeric failure: non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// Argument outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Archive load/validation failure, naming the offending field.
    #[error("archive error in `{field}`: {detail}")]
    Archive { field: String, detail: String },

    /// Training diverged (non-finite loss).
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl From<serde_json::Error> for CmcError {
    fn from(e: serde_json::Error) -> Self {
        CmcError::Parse(e.to_string())
    }
}

impl From<csv::Error> for CmcError {
    fn from(e: csv::Error) -> Self {
        CmcError::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CmcError>;
