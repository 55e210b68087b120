use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("{path}:{line}: parse error: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("unknown class {label:?} (record {utterance_id:?})")]
    UnknownClass { label: String, utterance_id: String },
    #[error("duplicate utterance id {0:?}")]
    DuplicateId(String),
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("waveform too short: {len} samples, need at least {needed}")]
    TooShort { len: usize, needed: usize },
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt payload: {0}")]
    Corrupt(String),
    #[error("missing feature matrix for utterance {0:?}")]
    MissingFeatures(String),
    #[error("class {0} has no training examples")]
    ZeroCount(usize),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::UnknownClass { .. } => "unknown_class",
            Error::DuplicateId(_) => "duplicate_id",
            Error::Vocabulary(_) => "vocabulary",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::TooShort { .. } => "too_short",
            Error::ConfigMismatch(_) => "config_mismatch",
            Error::Version { .. } => "version",
            Error::Corrupt(_) => "corrupt",
            Error::MissingFeatures(_) => "missing_features",
            Error::ZeroCount(_) => "zero_count",
            Error::Divergence { .. } => "divergence",
            Error::Empty(_) => "empty",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
