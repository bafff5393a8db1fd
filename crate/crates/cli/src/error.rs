use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad config, bad override, missing input file: exit status 2.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] implicitreg_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn field(key: &str, msg: impl std::fmt::Display) -> Self {
        CliError::Usage(format!("{key}: {msg}"))
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
