use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{0} out of range")]
    OutOfRange(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("{0}")]
    Undefined(String),
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error("unknown gradcheck selector `{0}`")]
    UnknownSelector(String),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] crate::harness::checkpoint::CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
