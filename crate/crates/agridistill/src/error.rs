use std::path::PathBuf;

/// Errors surfaced by the std-side toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] agridistill_core::Error),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("data integrity error: {0}")]
    Integrity(String),
    #[error("unknown domain '{0}'")]
    Lookup(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Process exit status for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) | Error::Lookup(_) => 2,
            Error::Core(agridistill_core::Error::Config(_) | agridistill_core::Error::Argument(_)) => 2,
            Error::Manifest(_) | Error::Integrity(_) | Error::Image { .. } => 3,
            Error::Divergence { .. } => 4,
            _ => 1,
        }
    }
}
