use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: cannot decode image: {message}")]
    Image { path: PathBuf, message: String },

    #[error("directory not found: {0}")]
    MissingDirectory(PathBuf),

    #[error("no frames matching `{pattern}` in {dir}")]
    EmptySequence { dir: PathBuf, pattern: String },

    #[error("{path}: frame is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    FrameSize {
        path: PathBuf,
        want_w: usize,
        want_h: usize,
        got_w: usize,
        got_h: usize,
    },

    #[error("invalid window length {window} for a sequence of {len} frames")]
    Window { window: usize, len: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("flow file {path}: {message}")]
    Flo { path: PathBuf, message: String },

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
