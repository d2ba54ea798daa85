use std::path::PathBuf;

/// Errors surfaced by the runner, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration or arguments (exit code 2).
    #[error("{0}")]
    Validation(String),
    /// A stage failed while running (exit code 3).
    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: robustshift::Error,
    },
    #[error("{0}")]
    Runtime(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            _ => 3,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Attaches a stage name to core errors.
pub trait StageContext<T> {
    fn stage(self, stage: &str) -> Result<T>;
    /// Same, but reports the failure as a validation error.
    fn invalid(self, what: &str) -> Result<T>;
}

impl<T> StageContext<T> for robustshift::Result<T> {
    fn stage(self, stage: &str) -> Result<T> {
        self.map_err(|source| CliError::Stage {
            stage: stage.to_string(),
            source,
        })
    }

    fn invalid(self, what: &str) -> Result<T> {
        self.map_err(|e| CliError::Validation(format!("{what}: {e}")))
    }
}
