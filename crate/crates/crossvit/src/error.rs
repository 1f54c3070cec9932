//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by tensor operations, model assembly, and the harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors had incompatible shapes for an operation.
    #[error("{op}: shape mismatch, {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operation was called outside its contract (bad axis, non-scalar
    /// loss, out-of-range slice, ...).
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },

    /// A model or training configuration failed validation. The message
    /// enumerates every offending field.
    #[error("invalid configuration:\n{0}")]
    Config(String),

    /// A checkpoint file was malformed or inconsistent with its header.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// A dataset file or directory could not be interpreted.
    #[error("dataset: {0}")]
    Dataset(String),

    /// Training produced a non-finite loss; the message names the first
    /// non-finite tensor on the tape.
    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract {
            op,
            msg: msg.into(),
        }
    }
}
