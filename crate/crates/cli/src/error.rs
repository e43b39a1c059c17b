use dfcn::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),

    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    /// 2 for usage and schema problems, 3 for bad data, 4 for numeric
    /// failure, 1 for a failed check.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::CheckFailed(_) => 1,
            CliError::Core(e) => match e {
                Error::InvalidConfig(_)
                | Error::ConfigMismatch(_)
                | Error::InvalidParameter(_)
                | Error::Json(_) => 2,
                Error::NonFinite(_) => 4,
                _ => 3,
            },
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;
