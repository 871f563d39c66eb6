use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input bytes (IDX headers, manifests, summary JSON).
    #[error("format error: {0}")]
    Format(String),

    /// A value outside its documented domain (e.g. a label byte > 9).
    #[error("range error: {0}")]
    Range(String),

    /// An invalid or inconsistent configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Structural mismatch between tensors, layouts, or partitions.
    #[error("shape error: {0}")]
    Shape(String),

    /// Underlying I/O failure, annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Non-finite model parameters encountered mid-run.
    #[error("divergence: non-finite parameters in trial {trial}, round {round}")]
    Divergence { trial: usize, round: usize },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 0 success, 2 config, 3 io/data, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) => 2,
            Error::Format(_) | Error::Range(_) | Error::Io { .. } => 3,
            Error::Divergence { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
