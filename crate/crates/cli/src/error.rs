use std::path::PathBuf;

use ddp_core::Error as CoreError;

/// Documented process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const RUNTIME: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const IO: i32 = 3;
    pub const NON_FINITE_LOSS: i32 = 4;
    pub const COLLISION: i32 = 5;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Io { .. } => exit::IO,
            CliError::Core(e) => match e {
                CoreError::Config(_)
                | CoreError::Shape { .. }
                | CoreError::ZeroVariance { .. }
                | CoreError::ConfigMismatch(_)
                | CoreError::Empty(_)
                | CoreError::OutOfBounds { .. } => exit::CONFIG,
                CoreError::Io { .. }
                | CoreError::MagicMismatch { .. }
                | CoreError::Truncated { .. }
                | CoreError::SizeMismatch { .. }
                | CoreError::Header(_) => exit::IO,
                CoreError::NonFiniteLoss { .. } => exit::NON_FINITE_LOSS,
                CoreError::InCollision { .. } => exit::COLLISION,
                _ => exit::RUNTIME,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
