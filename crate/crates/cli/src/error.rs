use aggpose_core::CoreError;
use aggpose_data::DataError;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, unreadable or invalid inputs.
    #[error("{0}")]
    Usage(String),
    /// A check or metric threshold failed.
    #[error("{0}")]
    Check(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Core(CoreError::from(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Check(_) => 1,
            CliError::Core(e) => match e {
                CoreError::Io { .. }
                | CoreError::Data(_)
                | CoreError::Metrics(_)
                | CoreError::Config(_)
                | CoreError::Checkpoint { .. }
                | CoreError::Load(_) => 2,
                _ => 1,
            },
        }
    }
}
