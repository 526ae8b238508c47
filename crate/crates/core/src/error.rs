use std::path::{Path, PathBuf};

use thiserror::Error;
use wingbeat_tensor::TensorError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: malformed WAV: {msg}", path.display())]
    MalformedWav { path: PathBuf, msg: String },

    #[error("{}: unsupported WAV: {msg}", path.display())]
    UnsupportedWav { path: PathBuf, msg: String },

    #[error("{}: data chunk is empty", path.display())]
    EmptyWav { path: PathBuf },

    #[error("sample {index} = {value} outside [-1, 1]")]
    SampleOutOfRange { index: usize, value: f32 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{}:{row}: {msg}", path.display())]
    Manifest { path: PathBuf, row: usize, msg: String },

    #[error("{}: {source}", path.display())]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("{}: bad {kind} file: {msg}", path.display())]
    Format {
        path: PathBuf,
        kind: &'static str,
        msg: String,
    },

    #[error("{}: unsupported {kind} version {found} (expected {expected})", path.display())]
    UnsupportedVersion {
        path: PathBuf,
        kind: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn in_file(self, path: &Path) -> Self {
        match self {
            e @ (Error::Io { .. }
            | Error::MalformedWav { .. }
            | Error::UnsupportedWav { .. }
            | Error::EmptyWav { .. }
            | Error::InFile { .. }) => e,
            other => Error::InFile {
                path: path.to_path_buf(),
                source: Box::new(other),
            },
        }
    }

    /// Process exit code: 2 usage/config, 3 data, 4 numeric divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => 2,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            Error::Format { .. } | Error::UnsupportedVersion { .. } => 2,
            Error::Divergence(_) => 4,
            Error::InFile { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}
