use std::path::PathBuf;

use llmq_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("validation failed: GAP {gap:.4} exceeds tolerance {tolerance}")]
    ValidationFailed { gap: f64, tolerance: f64 },
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

    /// 1 for usage and configuration problems, 2 for I/O, 3 for a failed validation.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io { .. } | CliError::Core(CoreError::Io { .. }) => 2,
            CliError::Core(_) => 1,
            CliError::ValidationFailed { .. } => 3,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
