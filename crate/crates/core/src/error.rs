use thiserror::Error;

/// Errors raised across the simulator and analysis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad label, port, name or argument supplied by the caller.
    #[error("usage error: {0}")]
    Usage(String),

    /// A matrix or state violates a mathematical precondition.
    #[error("domain error: {0}")]
    Domain(String),

    /// Configuration values are inconsistent or degenerate.
    #[error("configuration error: {0}")]
    Config(String),

    /// A fit or extraction could not produce a result.
    #[error("analysis error: {0}")]
    Analysis(String),

    #[error("degenerate parametrization: {0}")]
    Degenerate(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
