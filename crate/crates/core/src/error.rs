use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("invalid graph state: {0}")]
    State(String),
    #[error("non-finite value at {what} index {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),
    #[error("undefined similarity: {0}")]
    UndefinedSimilarity(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("dataset generation failed: {0}")]
    Generation(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed {format} file: {reason}")]
    Format { format: &'static str, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
