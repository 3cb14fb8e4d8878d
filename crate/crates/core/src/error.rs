use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-binary value {value} at flat index {index}; expected +1 or -1")]
    NonBinaryInput { index: usize, value: f64 },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("global average pooling over an empty spatial extent")]
    EmptySpatial,

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("backward state does not match: {0}")]
    StaleState(&'static str),

    #[error("padding {padding} is not supported for a kernel of extent {kernel}")]
    PaddingOverflow { padding: usize, kernel: usize },

    #[error("invalid config at `{path}`: {message}")]
    InvalidConfig { path: String, message: String },

    #[error("malformed model file in chunk `{chunk}`: {message}")]
    Format { chunk: String, message: String },

    #[error("unsupported model file version {found} (this build reads {supported})")]
    Version { found: u32, supported: u32 },

    #[error("bad magic number {found} in {file} (expected {expected})")]
    MagicMismatch {
        file: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{images} images but {labels} labels")]
    LengthMismatch { images: usize, labels: usize },

    #[error("{file}: size {size} is not a multiple of the {record}-byte record")]
    RecordSizeMismatch {
        file: PathBuf,
        size: u64,
        record: usize,
    },

    #[error("{file}: {message}")]
    Malformed { file: PathBuf, message: String },

    #[error("non-finite loss at step {step}\n{diagnostics}")]
    NonFiniteLoss { step: u64, diagnostics: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl std::fmt::Debug,
        actual: impl std::fmt::Debug,
    ) -> Self {
        Error::ShapeMismatch {
            context,
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
