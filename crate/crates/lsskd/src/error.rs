use std::path::PathBuf;

/// Failures of the command-line workflows, grouped by exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config {path}: {detail}")]
    Config { path: PathBuf, detail: String },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("data: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(lsskd_core::Error),
    #[error("{0}")]
    Core(lsskd_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("gradient check failed")]
    Gradcheck,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. } | CliError::Format { .. } | CliError::Core(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Gradcheck => 5,
            CliError::Io { .. } => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        CliError::Format { path: path.into(), detail: detail.into() }
    }
}

impl From<lsskd_core::Error> for CliError {
    fn from(e: lsskd_core::Error) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e)
        } else {
            CliError::Core(e)
        }
    }
}
