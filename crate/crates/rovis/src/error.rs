use std::path::PathBuf;

/// Crate-wide error type for fallible boundaries (I/O, formats, config,
/// training aborts). Programming errors inside numerical kernels (shape
/// mismatches, out-of-range indices) panic instead.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("autodiff: {0}")]
    Autodiff(String),
    #[error("training aborted: {0}")]
    Train(String),
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
