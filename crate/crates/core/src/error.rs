use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty request: {0}")]
    EmptyRequest(&'static str),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("pre-training of {network} failed: final {metric} {achieved:.4} above threshold {threshold:.4}")]
    PretrainingFailed {
        network: &'static str,
        metric: &'static str,
        achieved: f64,
        threshold: f64,
    },

    #[error("non-finite loss at iteration {iteration}: {snapshot}")]
    NonFiniteLoss { iteration: u64, snapshot: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
