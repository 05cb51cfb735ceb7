use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CtrError>;

#[derive(Debug, Error)]
pub enum CtrError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A numerical failure, e.g. a singular normal matrix in the filter
    /// regression. `context` names where it happened (frequency bin, solver
    /// iteration, ...).
    #[error("numerical error at {context}: {message}")]
    Numerical { context: String, message: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error on {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl CtrError {
    pub fn config(msg: impl Into<String>) -> Self {
        CtrError::Config(msg.into())
    }

    pub fn dim(msg: impl Into<String>) -> Self {
        CtrError::Dimension(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CtrError::Data(msg.into())
    }

    pub fn numerical(context: impl Into<String>, message: impl Into<String>) -> Self {
        CtrError::Numerical {
            context: context.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable tag used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            CtrError::Config(_) => "config",
            CtrError::Dimension(_) => "dimension",
            CtrError::Numerical { .. } => "numerical",
            CtrError::Data(_) => "data",
            CtrError::Io { .. } => "io",
            CtrError::Wav { .. } => "wav",
            CtrError::Json { .. } => "json",
        }
    }

    /// Process exit status: 1 usage/configuration, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CtrError::Config(_) => 1,
            CtrError::Numerical { .. } => 3,
            _ => 2,
        }
    }
}
