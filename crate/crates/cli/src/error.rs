use thiserror::Error;

/// Failure classes with stable process exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments or configuration (exit 2).
    #[error("usage error: {0}")]
    Usage(String),
    /// Unreadable or invalid dataset input (exit 3).
    #[error("data error: {0}")]
    Data(String),
    /// Anything that fails after inputs were accepted (exit 4).
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

impl From<trinity_core::Error> for CliError {
    fn from(e: trinity_core::Error) -> Self {
        use trinity_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) | E::EncoderUnavailable(_) | E::ProviderUnavailable(_) => CliError::Usage(msg),
            E::Manifest { .. } | E::Format(_) | E::Io { .. } | E::Checkpoint(_) => CliError::Data(msg),
            _ => CliError::Runtime(msg),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
