//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A binary or text artifact did not parse (bad magic, unknown dtype,
    /// payload size mismatch, malformed mesh, ...).
    #[error("format error: {0}")]
    Format(String),

    /// A caller passed arguments that violate an operation's contract.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration file failed to parse or validate.
    #[error("config error: {0}")]
    Config(String),

    /// A stage was invoked before the stage that produces its inputs.
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    /// Training left the finite regime.
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the command-line front end.
    #[must_use]
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidInput(_) => 2,
            Error::MissingPrerequisite(_) => 3,
            _ => 1,
        }
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn missing(msg: impl Into<String>) -> Self {
        Error::MissingPrerequisite(msg.into())
    }
}
