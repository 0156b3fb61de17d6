use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("input too short: {len} samples, need at least {min}")]
    InputTooShort { len: usize, min: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("misalignment: {0}")]
    Alignment(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unsupported schema version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error at {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line driver.
    ///
    /// 2 config, 3 data, 4 alignment, 5 numeric, 6 verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Alignment(_) => 4,
            Error::NonFinite(_) | Error::Diverged(_) => 5,
            Error::Verification(_) => 6,
            Error::Shape { .. }
            | Error::InputTooShort { .. }
            | Error::Empty(_)
            | Error::Contract(_)
            | Error::Data(_)
            | Error::Checkpoint(_)
            | Error::Version { .. }
            | Error::Io { .. }
            | Error::Wav { .. } => 3,
        }
    }

    /// Short machine-readable category name.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InputTooShort { .. } => "input_too_short",
            Error::Empty(_) => "empty",
            Error::NonFinite(_) => "non_finite",
            Error::Contract(_) => "contract",
            Error::Alignment(_) => "alignment",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Checkpoint(_) => "checkpoint",
            Error::Version { .. } => "version",
            Error::Diverged(_) => "diverged",
            Error::Verification(_) => "verification",
            Error::Io { .. } => "io",
            Error::Wav { .. } => "wav",
        }
    }
}
