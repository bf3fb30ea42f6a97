use vab_core::Error;

/// A failed command and the process exit code it maps to.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Missing or unreadable data files (exit 2).
    #[error("data error: {0}")]
    Data(String),
    /// Inputs whose dimensions disagree with the model (exit 3).
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// Unknown baseline method (exit 4).
    #[error("{0}")]
    Method(String),
    /// Code file header unreadable or inconsistent with the model (exit 5).
    #[error("code file: {0}")]
    CodeHeader(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Data(_) => 2,
            CliError::Dimension(_) => 3,
            CliError::Method(_) => 4,
            CliError::CodeHeader(_) => 5,
            CliError::Other(_) => 1,
        }
    }

    pub fn data(context: impl std::fmt::Display, err: Error) -> Self {
        CliError::Data(format!("{context}: {err}"))
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        match err {
            Error::Dimension { .. } => CliError::Dimension(err.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::Other(err.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(err: csv::Error) -> Self {
        CliError::Other(format!("csv: {err}"))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
