use thiserror::Error;

/// Error type shared by every module in the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer dimension mismatch.
    #[error("shape error: {0}")]
    Shape(String),
    /// A documented precondition was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),
    /// Invalid model or run configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Malformed or truncated checkpoint file.
    #[error("checkpoint format error: {0}")]
    Format(String),
    /// Dataset could not be read or decoded.
    #[error("ingestion error: {0}")]
    Ingestion(String),
    /// Optimization step could not proceed (e.g. non-finite gradients).
    #[error("training error: {0}")]
    Training(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
