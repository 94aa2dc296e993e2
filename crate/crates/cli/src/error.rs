use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: contrast_lab::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<contrast_lab::Error> for CliError {
    fn from(source: contrast_lab::Error) -> Self {
        CliError::Core {
            context: "computation failed".into(),
            source,
        }
    }
}

pub trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, CliError>;
}

impl<T> Context<T> for contrast_lab::Result<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, CliError> {
        self.map_err(|source| CliError::Core { context: what(), source })
    }
}
