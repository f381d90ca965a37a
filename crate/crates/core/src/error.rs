use std::fmt;

/// Errors raised anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum HtrError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint rejected: {0}")]
    Checkpoint(CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Reasons a checkpoint file is refused on load.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckpointError {
    BadMagic,
    UnsupportedVersion(u32),
    Truncated,
    ChecksumMismatch { stored: u32, computed: u32 },
    MalformedHeader(String),
    DtypeMismatch { expected: String, found: String },
    HyperparameterMismatch(String),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::BadMagic => write!(f, "bad magic bytes"),
            CheckpointError::UnsupportedVersion(v) => write!(f, "unsupported format version {v}"),
            CheckpointError::Truncated => write!(f, "file truncated"),
            CheckpointError::ChecksumMismatch { stored, computed } => {
                write!(f, "crc32 mismatch (stored {stored:08x}, computed {computed:08x})")
            }
            CheckpointError::MalformedHeader(m) => write!(f, "malformed header: {m}"),
            CheckpointError::DtypeMismatch { expected, found } => {
                write!(f, "dtype mismatch: expected {expected}, found {found}")
            }
            CheckpointError::HyperparameterMismatch(m) => write!(f, "hyperparameter mismatch: {m}"),
        }
    }
}

impl From<CheckpointError> for HtrError {
    fn from(e: CheckpointError) -> Self {
        HtrError::Checkpoint(e)
    }
}

pub type Result<T, E = HtrError> = std::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::HtrError::Dimension(format!($($arg)*)) };
}
macro_rules! contract_err {
    ($($arg:tt)*) => { $crate::error::HtrError::Contract(format!($($arg)*)) };
}
pub(crate) use contract_err;
pub(crate) use dim_err;
