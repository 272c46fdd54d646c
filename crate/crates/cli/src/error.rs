use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] asr_core::Error),

    #[error("{0}")]
    Config(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("models differ: deviation {deviation:e} exceeds tolerance {tol:e}")]
    NotEquivalent { deviation: f64, tol: f64 },
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::File {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Config(_) => "config",
            CliError::File { source, .. } if source.kind() == std::io::ErrorKind::NotFound => "missing_file",
            CliError::File { .. } => "io",
            CliError::NotEquivalent { .. } => "verification",
        }
    }

    /// `error: kind=<kind> msg="<message>"` on one line.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
        format!("error: kind={} msg=\"{msg}\"", self.kind())
    }
}
