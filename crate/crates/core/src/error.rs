use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image format: {0}")]
    Format(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("model state: {0}")]
    State(String),
    #[error("configuration mismatch: {0}")]
    Config(String),
    #[error("non-finite {component} loss at iteration {iter}")]
    NonFinite { component: &'static str, iter: u64 },
    #[error("ingestion: {0}")]
    Ingestion(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("enhancer {program} failed: {status}")]
    Enhancer { program: String, status: String },
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Coder(#[from] lumen_rans::CoderError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
