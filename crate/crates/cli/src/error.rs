use thiserror::Error;

/// Failure classes with their process exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    NonConvergence(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Validation(_) => 2,
            Self::NonConvergence(_) => 3,
            Self::Io(_) => 4,
        }
    }
}

impl From<mfspde::Error> for CliError {
    fn from(e: mfspde::Error) -> Self {
        let msg = e.to_string();
        if e.is_io() {
            Self::Io(msg)
        } else if e.is_validation() || matches!(e, mfspde::Error::SingularOperator { .. }) {
            Self::Validation(msg)
        } else {
            // blow-ups, rank deficiency and non-finite costs are solver failures
            Self::NonConvergence(msg)
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}
