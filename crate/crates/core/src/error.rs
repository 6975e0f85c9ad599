use std::io;

use thiserror::Error;

/// Errors produced by the quantization lab.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied data or configuration that violates a precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An optimizer or EM run could not produce a usable result.
    #[error("training failed: {0}")]
    Training(String),

    /// SGD produced a non-finite loss or gradient; `checkpoint` holds the
    /// last parameters for which both were finite.
    #[error("training diverged at step {step}")]
    Diverged {
        step: usize,
        checkpoint: Box<crate::valquant::ValueQuantizer>,
    },

    /// A serialized artifact or packed buffer is malformed.
    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}

pub(crate) fn corrupt<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Corrupt(msg.into()))
}
