use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or dimensions that do not fit together.
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid input: {0}")]
    InputValidation(String),

    #[error("batching error: {0}")]
    Batching(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("unsupported variant {found}: {reason}")]
    UnsupportedVariant { found: String, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite objective at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
