use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PgatError> = std::result::Result<T, E>;

/// Every failure the pipeline can report. Variants map onto the error
/// categories the CLI prints.
#[derive(Debug, Error)]
pub enum PgatError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("unknown keynode id {0}")]
    Lookup(u64),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("training error in `{param}`: {msg}")]
    Training { param: String, msg: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PgatError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        PgatError::Dimension(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PgatError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short category tag used by the command-line front end.
    pub fn category(&self) -> &'static str {
        match self {
            PgatError::Dimension(_) => "dimension",
            PgatError::Degenerate(_) => "degenerate-input",
            PgatError::Input(_) => "input",
            PgatError::Lookup(_) => "lookup",
            PgatError::Sampling(_) => "sampling",
            PgatError::Dataset(_) => "dataset",
            PgatError::Training { .. } => "training",
            PgatError::NonFinite(_) => "numeric",
            PgatError::Config(_) => "config",
            PgatError::Parse { .. } => "parse",
            PgatError::Checkpoint(_) => "checkpoint",
            PgatError::Io { .. } => "io",
        }
    }
}
