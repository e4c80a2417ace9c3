use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite values produced by {0}")]
    NonFinite(&'static str),

    #[error("power iteration start vector was zero after {0} redraws")]
    DegenerateStart(usize),

    #[error("partition left a shard empty after {0} attempts")]
    EmptyShard(usize),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("undefined: {0}")]
    Undefined(&'static str),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used for CLI exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) | Error::InvalidArgument(_) => "invalid-input",
            Error::NonFinite(_) | Error::DegenerateStart(_) | Error::Undefined(_) => "numeric",
            Error::EmptyShard(_) => "partition",
            Error::Parse { .. } | Error::Csv(_) | Error::Json(_) => "parse",
            Error::Config(_) => "config",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Io { .. } => "io",
        }
    }
}
