use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure modes of the binary container formats (SPST, FEAT, MDLP).
#[derive(Debug, Error)]
pub enum CodecError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { expected: u32, found: u32 },
    #[error("truncated file while reading {context}")]
    Truncated { context: &'static str },
    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("invalid payload: {0}")]
    Invalid(String),
    #[error("trailing bytes after footer")]
    TrailingData,
    #[error(transparent)]
    Io(io::Error),
}

impl CodecError {
    /// Stable numeric code, distinct per failure kind.
    pub fn code(&self) -> u32 {
        match self {
            CodecError::BadMagic { .. } => 1,
            CodecError::UnsupportedVersion { .. } => 2,
            CodecError::Truncated { .. } => 3,
            CodecError::CrcMismatch { .. } => 4,
            CodecError::Invalid(_) => 5,
            CodecError::TrailingData => 6,
            CodecError::Io(_) => 7,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid distribution: {0}")]
    Distribution(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("data mismatch: {0}")]
    Data(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
