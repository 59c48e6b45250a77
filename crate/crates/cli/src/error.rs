use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    /// A named input file is missing or unreadable.
    #[error("cannot read input {0}")]
    Input(String),

    #[error(transparent)]
    Core(#[from] numlesa::Error),
}

impl CliError {
    /// 2 usage, 3 config, 4 data, 5 training divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Input(_) => 4,
            CliError::Core(numlesa::Error::Validation { .. }) => 3,
            CliError::Core(numlesa::Error::Divergence { .. }) => 5,
            CliError::Core(_) => 4,
        }
    }
}
