//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the tensor engine, layers, model, training, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration violates one of its invariants.
    #[error("configuration error: {0}")]
    Configuration(String),

    /// An operation was called outside its contract (non-scalar loss,
    /// missing gradients, out-of-range epoch, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// A dataset is missing, empty, or inconsistent.
    #[error("data error: {0}")]
    Data(String),

    /// A file could not be parsed; `offset` is the byte position of the
    /// first offending byte.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// A binary artifact (tensor blob, checkpoint) has the wrong magic or
    /// version.
    #[error("format error: {0}")]
    Format(String),

    /// A statistical test is undefined for the given input (e.g. all paired
    /// differences are zero).
    #[error("undefined test: {0}")]
    UndefinedTest(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
