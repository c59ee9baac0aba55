use std::path::PathBuf;

/// Errors of the front end. Each maps to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error at `{path}`: {reason}")]
    Config { path: String, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed input {path}: {reason}")]
    Input { path: PathBuf, reason: String },
    #[error(transparent)]
    Core(#[from] wflow_core::Error),
}

impl CliError {
    pub fn config(path: impl Into<String>, reason: impl Into<String>) -> Self {
        CliError::Config { path: path.into(), reason: reason.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// `2` for configuration errors, `1` otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Attaches a config path to core parameter errors raised while building from a config.
pub(crate) trait AtPath<T> {
    fn at(self, path: &str) -> Result<T>;
}

impl<T> AtPath<T> for wflow_core::Result<T> {
    fn at(self, path: &str) -> Result<T> {
        self.map_err(|e| CliError::config(path, e.to_string()))
    }
}
