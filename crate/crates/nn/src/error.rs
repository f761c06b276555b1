use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("variable {0} is not on this tape")]
    NotOnTape(usize),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;
