use llab_autodiff::AdError;
use thiserror::Error;

use crate::train::TrainedModel;

/// Broad failure class, used by the command line to pick an exit status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Numeric,
    State,
    Range,
    Plan,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("fault plan error: {0}")]
    Plan(String),
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String, last_good: Box<TrainedModel> },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Numeric(_) | Error::Diverged { .. } => ErrorKind::Numeric,
            Error::Range(_) => ErrorKind::Range,
            Error::Plan(_) => ErrorKind::Plan,
            Error::Autodiff(e) => match e {
                AdError::Shape { .. } | AdError::Layout(_) => ErrorKind::Config,
                AdError::NonFinite { .. } => ErrorKind::Numeric,
                AdError::State(_) => ErrorKind::State,
            },
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
