use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed image header: {0}")]
    MalformedHeader(String),

    #[error("unsupported bit depth or color type: {0}")]
    UnsupportedFormat(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("label value {value} out of range for {classes} classes")]
    LabelOutOfRange { value: u8, classes: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{path}:{line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("unknown branch `{0}`")]
    UnknownBranch(String),

    #[error("category `{0}` is not in the taxonomy")]
    UnknownCategory(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("png codec: {0}")]
    Png(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
