use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("{size} units is too large for exact enumeration (limit {limit})")]
    TooLargeForEnumeration { size: usize, limit: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("embedding capacity exceeded: {0}")]
    Capacity(String),

    #[error("no accepted samples: all {total} reads were rejected by chain voting")]
    NoAcceptedSamples { total: usize },

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error("dataset format: {0}")]
    DatasetFormat(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, with context layers stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for failures caused by input data rather than numerics or usage.
    pub fn is_data_error(&self) -> bool {
        matches!(self.root(), Error::Idx(_) | Error::DatasetFormat(_) | Error::Io { .. })
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self.root(), Error::NonFinite(_) | Error::NoAcceptedSamples { .. })
    }
}

/// Failures while parsing MNIST IDX files.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("wrong magic number: expected {expected:#010x}, found {found:#010x}")]
    WrongMagic { expected: u32, found: u32 },

    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("image/label count mismatch: {images} images, {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("unexpected image dimensions {rows}x{cols}, expected 28x28")]
    BadDimensions { rows: usize, cols: usize },

    #[error("label {0} out of range 0..=9")]
    BadLabel(u8),
}
