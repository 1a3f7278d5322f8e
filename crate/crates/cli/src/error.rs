use std::path::PathBuf;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{origin}:{line}:{column}: {message}")]
    Config {
        origin: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Data {
        path: PathBuf,
        #[source]
        source: notercnn::Error,
    },
    #[error(transparent)]
    Core(#[from] notercnn::Error),
    #[error("{path}: missing column {column:?}")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}:{line}: {message}")]
    Table {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl CliError {
    /// Short machine-readable category used in the error prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config { .. } | CliError::Invalid(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Data { .. } => "data",
            CliError::Core(notercnn::Error::Iteration { .. }) | CliError::Core(notercnn::Error::NonFinite { .. }) => {
                "training"
            }
            CliError::Core(_) => "core",
            CliError::MissingColumn { .. } | CliError::Table { .. } => "report",
        }
    }

    /// The message collapsed onto one line.
    pub fn one_line(&self) -> String {
        self.to_string().split_whitespace().collect::<Vec<_>>().join(" ")
    }
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
