use std::path::PathBuf;
use thiserror::Error;

/// Errors produced by the refocus library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("truncated stream: expected {expected} bytes of pixel data, got {got}")]
    TruncatedStream { expected: usize, got: usize },

    #[error("invalid pattern parameter: {0}")]
    InvalidPattern(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimensions {width}x{height} not divisible by factor {factor}")]
    NonDivisible {
        width: usize,
        height: usize,
        factor: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("token id {id} out of range for codebook of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("training diverged at step {step}: {what} is not finite")]
    Diverged { step: usize, what: String },

    #[error("malformed parameter blob: {0}")]
    MalformedBlob(String),
}

pub type Result<T> = std::result::Result<T, Error>;
