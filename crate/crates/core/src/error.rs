use std::io;

use thiserror::Error;

/// Errors raised when an HSQF or HSQW file does not match its layout.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("truncated payload while reading {what}")]
    Truncated { what: String },
    #[error("geometry violation at level {level}: {detail}")]
    Geometry { level: usize, detail: String },
    #[error("malformed file: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum HsqError {
    /// A shape or finiteness precondition of a numeric operation was broken.
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    /// The two pyramids handed to the projector disagree at a level.
    #[error("ingestion error at level {level}: {detail}")]
    Ingestion { level: usize, detail: String },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("no gradient recorded for parameter `{0}`")]
    MissingGradient(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T, E = HsqError> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> HsqError {
    HsqError::Contract(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> HsqError {
    HsqError::Config(msg.into())
}
