use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid difficulty knobs: {0}")]
    InvalidKnobs(String),
    #[error("infeasible knobs: {0}")]
    InfeasibleKnobs(String),
    #[error("invalid planner profile: {0}")]
    InvalidProfile(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("no positive labels; cannot train the difficulty model")]
    NoPositives,
    #[error("missing score for segment {0}")]
    MissingScore(String),
    #[error("bucket {0} has positive weight but no segments")]
    EmptyBucket(usize),
    #[error("zero sampling probability for bucket {0}, which appears in the batch")]
    ZeroProbability(usize),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },
    #[error("corrupt data in {path}: {detail}")]
    Corrupt { path: String, detail: String },
    #[error(transparent)]
    Nn(#[from] hardcase_nn::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
