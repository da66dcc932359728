use tensorcore::TensorError;
use thiserror::Error;

use crate::env::EnvError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Fails with [`Error::NonFinite`] naming `what` unless `v` is finite.
pub(crate) fn finite(v: f32, what: &str) -> Result<f32> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

impl Error {
    /// A loss, activation or gradient went NaN or infinite.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::Tensor(TensorError::NonFiniteGradient(_)))
    }
}
