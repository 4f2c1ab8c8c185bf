use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SealError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("duplicate entry: {0}")]
    Duplicate(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid stage: {0}")]
    Stage(String),
    #[error("unsupported version: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },
    #[error("digest mismatch: {0}")]
    Digest(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, SealError>;

impl SealError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SealError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end:
    /// 1 usage/configuration, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            SealError::InvalidArgument(_) | SealError::Config(_) => 1,
            SealError::Numerical(_) => 3,
            _ => 2,
        }
    }
}
