use std::path::Path;

use tensorcore::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScreenError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("configuration error: {0}")]
    Config(String),
}

impl ScreenError {
    pub fn io(context: &str, err: std::io::Error) -> ScreenError {
        ScreenError::Io(format!("{}: {}", context, err))
    }

    pub fn io_path(context: &str, path: &Path, err: std::io::Error) -> ScreenError {
        ScreenError::Io(format!("{} '{}': {}", context, path.display(), err))
    }

    /// Process exit code contract: 0 ok, 2 validation, 3 I/O, 4 configuration.
    pub fn exit_code(&self) -> i32 {
        match self {
            ScreenError::Validation(_) => 2,
            ScreenError::Io(_) => 3,
            ScreenError::Config(_) => 4,
        }
    }
}

impl From<TensorError> for ScreenError {
    fn from(err: TensorError) -> ScreenError {
        match err {
            TensorError::Io(e) => ScreenError::Io(e.to_string()),
            TensorError::Format(m) => ScreenError::Config(format!("checkpoint: {}", m)),
            other => ScreenError::Validation(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, ScreenError>;
