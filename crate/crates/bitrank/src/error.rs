//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("input contains no interactions")]
    EmptyInput,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("file truncated while reading {0}")]
    Truncated(&'static str),

    #[error("wrong model kind: expected {expected}, found {found}")]
    WrongModelKind { expected: &'static str, found: &'static str },

    #[error("{what} index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("buffer size mismatch: expected {expected}, got {got}")]
    BufferSize { expected: usize, got: usize },

    #[error("non-finite gradient in {tensor} at row {row}")]
    NonFiniteGradient { tensor: &'static str, row: usize },

    #[error("target item {0} is in the excluded set")]
    TargetExcluded(u32),

    #[error("all {0} search trials failed")]
    AllTrialsFailed(usize),

    #[error("malformed report line: {0}")]
    MalformedReport(String),
}

impl Error {
    /// Process exit code for the CLI: 1 usage, 2 data, 3 runtime failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) => 1,
            Error::Io(_)
            | Error::Parse { .. }
            | Error::EmptyInput
            | Error::BadMagic { .. }
            | Error::UnsupportedVersion(_)
            | Error::Truncated(_)
            | Error::WrongModelKind { .. }
            | Error::MalformedReport(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
