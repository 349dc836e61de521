use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand extents do not line up for an operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed on-disk input (dataset files, partition files).
    #[error("format error: {0}")]
    Format(String),

    /// A message or packed payload whose declared lengths disagree with its contents.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Client and server tensor sets disagree.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
