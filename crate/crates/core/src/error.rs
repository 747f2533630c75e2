use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("basis index ({u}, {v}) out of range for a {height}x{width} plane")]
    Index {
        u: usize,
        v: usize,
        height: usize,
        width: usize,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("encoder unavailable: {0}")]
    EncoderUnavailable(String),

    #[error("caption provider unavailable: {0}")]
    ProviderUnavailable(String),

    #[error("image format error: {0}")]
    Format(String),

    /// One message per offending manifest line, already prefixed with the line number.
    #[error("manifest {path}: {}", .problems.join("; "))]
    Manifest {
        path: PathBuf,
        problems: Vec<String>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
