use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("pose dimension mismatch: model expects {expected}, data has {found}")]
    PoseDims { expected: usize, found: usize },

    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite values in {location}")]
    NonFinite { location: String },

    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config { .. } | Error::PoseDims { .. } => 1,
            Error::Malformed { .. } | Error::Version { .. } | Error::Data(_) | Error::Io(_) | Error::Json(_) => 2,
            Error::NonFinite { .. } | Error::Diverged { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
