//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    Shape {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// A precondition of an operation was violated.
    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },

    /// File or stream parsing failed.
    #[error("parse error in {path} at byte {offset}: {msg}")]
    Parse {
        path: String,
        offset: u64,
        msg: String,
    },

    /// Checkpoint container problems (version, config, per-tensor records).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A computation produced NaN or infinity where finite values are required.
    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: format!("{lhs:?}"),
            rhs: format!("{rhs:?}"),
        }
    }

    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract {
            op,
            msg: msg.into(),
        }
    }
}
