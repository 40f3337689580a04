use thiserror::Error;

/// Error type shared by every module in the crate.
///
/// Variants group into the exit classes the CLI reports: configuration,
/// data, io, and numeric divergence. Checkpoint decoding failures get
/// dedicated variants so callers can distinguish a bad magic from a
/// truncated file or a parameter mismatch.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric divergence: {0}")]
    Numeric(String),
    #[error("io: {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint magic mismatch: {0}")]
    CheckpointMagic(String),
    #[error("checkpoint format version {0} unsupported")]
    CheckpointVersion(u32),
    #[error("checkpoint truncated: {0}")]
    CheckpointTruncated(String),
    #[error("checkpoint has unknown parameter `{0}`")]
    CheckpointUnknownParam(String),
    #[error("checkpoint shape mismatch for parameter `{name}`: file {file:?}, model {model:?}")]
    CheckpointShape {
        name: String,
        file: Vec<usize>,
        model: Vec<usize>,
    },
}

/// Machine-parsable error class, also used as the CLI exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad configuration, shapes, or API contracts (exit 2).
    Config,
    /// Bad data files: manifests, corpora, checkpoints (exit 3).
    Data,
    /// Filesystem failures (exit 4).
    Io,
    /// Non-finite losses or diverging optimization (exit 5).
    Numeric,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Io => 4,
            ErrorClass::Numeric => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorClass::Config => "config",
            ErrorClass::Data => "data",
            ErrorClass::Io => "io",
            ErrorClass::Numeric => "numeric",
        }
    }
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Shape(_)
            | Error::InvalidValue(_)
            | Error::Config(_)
            | Error::Contract(_)
            | Error::State(_) => ErrorClass::Config,
            Error::Data(_)
            | Error::CheckpointMagic(_)
            | Error::CheckpointVersion(_)
            | Error::CheckpointTruncated(_)
            | Error::CheckpointUnknownParam(_)
            | Error::CheckpointShape { .. } => ErrorClass::Data,
            Error::Io { .. } => ErrorClass::Io,
            Error::Numeric(_) => ErrorClass::Numeric,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
