use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid workload: {0}")]
    InvalidSpec(String),

    #[error("invalid request state: {0}")]
    InvalidState(String),

    #[error("infeasible deployment: a request may need {needed} tokens but the memory limit is {limit}")]
    Infeasible { needed: u64, limit: u64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("outstanding-demand identity violated at slot {slot}: residual {residual}")]
    DriftMismatch { slot: u64, residual: i128 },

    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: String,
        line: u64,
        msg: String,
    },

    #[error("{path}: row {row}: {msg}")]
    Row { path: String, row: u64, msg: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
