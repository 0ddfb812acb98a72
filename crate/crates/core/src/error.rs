use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("estimator failure: {0}")]
    EstimatorFailure(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    TrainingDivergence { epoch: u64, reason: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("checkpoint error at byte offset {offset}: {message}")]
    Checkpoint { offset: usize, message: String },

    #[error("config error (line {line}, key `{key}`): {message}")]
    Config {
        line: usize,
        key: String,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::InvalidShape(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
