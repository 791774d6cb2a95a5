use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum EmarError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("history window is empty")]
    EmptyHistory,

    #[error("insufficient history: {0}")]
    InsufficientHistory(String),

    #[error("ill-posed reconstruction: {0}")]
    IllPosed(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("fixed-point overflow: {value} does not fit the quantization range")]
    QuantizationOverflow { value: f64 },

    #[error("round aborted: {0}")]
    AbortedRound(String),

    #[error("training diverged for client {client} in round {round}")]
    TrainingDiverged { client: u16, round: u32 },

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl EmarError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        EmarError::InvalidInput(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        EmarError::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, EmarError>;
