use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("unsupported platform: {0}")]
    Unsupported(String),

    #[error("backend failure: {0}")]
    Backend(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code used by the CLI for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) | Error::Index { .. } | Error::Empty(_) => 2,
            Error::Numerical(_) | Error::Calibration(_) => 3,
            Error::Backend(_) | Error::Unsupported(_) | Error::Io(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
