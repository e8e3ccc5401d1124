use thiserror::Error;

/// Failures raised while recording or differentiating a tape.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op} at node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("tape state error: {0}")]
    State(String),
    #[error("layout mismatch: {0}")]
    Layout(String),
}

impl AdError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        AdError::Shape { op, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, AdError>;
