use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    Dimension { expected: usize, found: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("class {0} is not present in the prototype table")]
    MissingClass(u32),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("gram matrix is numerically singular (condition number {condition:e})")]
    Singular { condition: f64 },

    #[error("optimization diverged at step {step}")]
    Divergence { step: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("feature dump error: {0}")]
    Dump(#[from] DumpError),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serialize(String),
}

/// Failure categories, mapped to process exit codes by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Input,
    Numeric,
    Config,
    Format,
    Io,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Input => 2,
            ErrorCategory::Config => 3,
            ErrorCategory::Format => 4,
            ErrorCategory::Numeric => 5,
            ErrorCategory::Io => 6,
        }
    }
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Dimension { .. }
            | Error::Empty(_)
            | Error::Degenerate(_)
            | Error::MissingClass(_)
            | Error::Invalid(_) => ErrorCategory::Input,
            Error::Singular { .. } | Error::Divergence { .. } => ErrorCategory::Numeric,
            Error::Config(_) => ErrorCategory::Config,
            Error::Dump(_) | Error::Serialize(_) => ErrorCategory::Format,
            Error::Io { .. } => ErrorCategory::Io,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Structural problems found while reading a feature dump.
#[derive(Debug, Error, PartialEq)]
pub enum DumpError {
    #[error("bad magic bytes {found:?}")]
    BadMagic { found: [u8; 8] },

    #[error("unsupported dump version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload at byte offset {offset} (needed {needed} more bytes)")]
    Truncated { offset: u64, needed: u64 },

    #[error("dimension {found} does not match expected {expected}")]
    Dimension { expected: u32, found: u32 },

    #[error("non-finite value in record {record} at byte offset {offset}")]
    NonFinite { record: u64, offset: u64 },

    #[error("invalid split tag {tag} in record {record}")]
    BadSplit { record: u64, tag: u8 },

    #[error("trailing bytes after the last record at offset {offset}")]
    TrailingBytes { offset: u64 },

    #[error("record {record}: {reason}")]
    Inconsistent { record: u64, reason: String },
}

impl DumpError {
    /// Stable numeric code per variant.
    pub fn code(&self) -> u32 {
        match self {
            DumpError::BadMagic { .. } => 10,
            DumpError::UnsupportedVersion(_) => 11,
            DumpError::Truncated { .. } => 12,
            DumpError::Dimension { .. } => 13,
            DumpError::NonFinite { .. } => 14,
            DumpError::BadSplit { .. } => 15,
            DumpError::TrailingBytes { .. } => 16,
            DumpError::Inconsistent { .. } => 17,
        }
    }
}
