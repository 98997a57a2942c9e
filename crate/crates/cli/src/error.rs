use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] nvdress_core::Error),

    #[error("plot error: {0}")]
    Plot(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 config, 3 physics domain, 4 fit failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use nvdress_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Plot(_) => 2,
            CliError::Core(E::Fit(_)) => 4,
            CliError::Core(e) if e.is_physics() => 3,
            // Bad parameter values reach the core straight from the config.
            CliError::Core(_) => 2,
            CliError::Io { .. } => 1,
        }
    }
}
