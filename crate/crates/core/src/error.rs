use std::path::PathBuf;

/// Errors produced anywhere in the planner pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("dimension {dim} has zero variance and cannot be normalized")]
    ZeroVariance { dim: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite loss at step {step} (parameter norm {param_norm})")]
    NonFiniteLoss { step: usize, param_norm: f64 },

    #[error("reverse step {step} produced a non-finite value{}", path.map(|p| format!(" in path {p}")).unwrap_or_default())]
    NonFiniteStep { step: usize, path: Option<usize> },

    #[error("{which} pose is inside an obstacle")]
    InCollision { which: &'static str },

    #[error("{which} pose is outside the workspace bounds")]
    OutOfBounds { which: &'static str },

    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    MagicMismatch { expected: [u8; 8], found: Vec<u8> },

    #[error("truncated file: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },

    #[error("payload size {actual} disagrees with the {expected} bytes promised by the header")]
    SizeMismatch { expected: usize, actual: usize },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("checkpoint does not match the requested configuration: {0}")]
    ConfigMismatch(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
