use thiserror::Error;

/// Errors shared across the crate.
#[derive(Error, Debug)]
pub enum Error {
    /// Tensor or image dimensions violate an operation's contract.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A value-level contract was violated (wrong color space, bad range, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input data (dataset files, checkpoints, logs).
    #[error("parse error: {0}")]
    Parse(String),

    /// Training diverged; carries the offending batch description.
    #[error("NaN loss at step {step}; batch: {batch}")]
    NanLoss { step: u64, batch: String },

    /// Checkpoint does not match the model it is loaded into.
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }
}
