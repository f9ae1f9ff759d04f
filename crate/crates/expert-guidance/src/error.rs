//! Shared error type for the sampling stack.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid argument to a numerical routine (range, shape, ordering).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Conditioning selects no mixture component.
    #[error("conditioning error: {0}")]
    Conditioning(String),

    /// Expert model misuse (degenerate embedding, shape mismatch, bad patching).
    #[error("expert error: {0}")]
    Expert(String),

    /// Failure inside a guided sampling step, tagged with the timestep.
    #[error("guidance error at t={t}: {msg}")]
    Guidance { t: usize, msg: String },

    /// Invalid or inconsistent experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code for the CLI: 1 validation, 2 runtime guidance, 3 selfcheck.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Guidance { .. } => 2,
            _ => 1,
        }
    }
}
