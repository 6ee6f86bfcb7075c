use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An input violated an operation's preconditions (shapes, ranges).
    #[error("contract violation: {0}")]
    Contract(String),
    /// Invalid configuration or hyperparameters.
    #[error("configuration error: {0}")]
    Config(String),
    /// Missing, unreadable or malformed input data.
    #[error("{path}: {msg}")]
    Data { path: PathBuf, msg: String },
    /// Benchmark split counts did not match the expected table.
    #[error("benchmark counts do not match:\n{0}")]
    CountMismatch(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    /// Training or inference failed at run time.
    #[error("{0}")]
    Runtime(String),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn data(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Data { path: path.into(), msg: msg.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for command-line front ends: 1 usage/config,
    /// 2 data, 3 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Data { .. } | Error::CountMismatch(_) | Error::Io { .. } | Error::Image { .. } => 2,
            Error::Checkpoint { .. } => 2,
            Error::Contract(_) | Error::Runtime(_) => 3,
        }
    }
}

impl From<cxr_tensor::io::IoError> for Error {
    fn from(e: cxr_tensor::io::IoError) -> Self {
        match e {
            cxr_tensor::io::IoError::Fs { path, source } => Error::Io { path: path.into(), source },
            cxr_tensor::io::IoError::Format { path, msg } => Error::Checkpoint { path: path.into(), msg },
        }
    }
}
