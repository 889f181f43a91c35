use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("random graph generation failed after {retries} attempts (n={nodes}, p={edge_prob})")]
    GenerationFailure {
        nodes: usize,
        edge_prob: f64,
        retries: usize,
    },

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("topology is disconnected: {0}")]
    Disconnected(String),

    /// The probe set cannot determine every link parameter.
    #[error("identifiability failure: {message}")]
    Identifiability {
        message: String,
        /// 1-based indices of links outside the row space of the measurement matrix.
        links: Vec<usize>,
    },

    #[error("unsupported topology: {0}")]
    UnsupportedTopology(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Identifiability { .. } => 3,
            Error::Io { .. } => 4,
            _ => 2,
        }
    }
}
