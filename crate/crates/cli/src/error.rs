use kkl::KklError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("all {0} tuning entries are invalid")]
    AllInvalid(usize),

    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },

    #[error(transparent)]
    Core(#[from] KklError),
}

impl CliError {
    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::AllInvalid(_) => 5,
            CliError::Io { .. } => 1,
            CliError::Core(e) => match e {
                KklError::InvalidInput(_) => 2,
                KklError::BlowUp { .. } => 3,
                KklError::NonFiniteLoss { .. } => 4,
                KklError::NonFiniteState { .. } => 6,
                _ => 1,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
