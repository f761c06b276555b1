use hardcase::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0} already exists; pass --force to replace it")]
    Exists(String),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error("stale artifact: {0}")]
    Stale(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Nn(#[from] hardcase_nn::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    /// 2 config, 3 missing or stale artifact, 4 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Exists(_) => 2,
            CliError::Missing(_) | CliError::Stale(_) => 3,
            CliError::Core(e) => match e {
                CoreError::InvalidKnobs(_) | CoreError::InfeasibleKnobs(_) | CoreError::InvalidProfile(_) | CoreError::Invalid(_) => 2,
                CoreError::Divergence { .. } | CoreError::Nn(hardcase_nn::NnError::NonFinite { .. }) => 4,
                CoreError::Corrupt { .. } | CoreError::MissingScore(_) => 3,
                CoreError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 3,
                _ => 1,
            },
            CliError::Nn(hardcase_nn::NnError::NonFinite { .. }) => 4,
            CliError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 3,
            _ => 1,
        }
    }
}
