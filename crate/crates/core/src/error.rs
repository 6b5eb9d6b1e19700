use thiserror::Error;

/// Errors produced by the modeling, decoding and training routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("constraint violation: {0}")]
    Constraint(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("size limit exceeded: {what} = {got} (limit {limit})")]
    SizeLimit {
        what: &'static str,
        got: usize,
        limit: usize,
    },

    #[error("canvas too long: {len} positions exceed max_len {max_len}")]
    Length { len: usize, max_len: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error ({kind}): {detail}")]
    Checkpoint { kind: CheckpointErrorKind, detail: String },

    #[error("i/o error: {0}")]
    Io(String),
}

/// Distinguishes the ways a checkpoint file can be rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointErrorKind {
    BadMagic,
    Version,
    Truncated,
    ShapeMismatch,
}

impl CheckpointErrorKind {
    pub fn code(self) -> u8 {
        match self {
            CheckpointErrorKind::BadMagic => 1,
            CheckpointErrorKind::Version => 2,
            CheckpointErrorKind::Truncated => 3,
            CheckpointErrorKind::ShapeMismatch => 4,
        }
    }
}

impl std::fmt::Display for CheckpointErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CheckpointErrorKind::BadMagic => "bad magic",
            CheckpointErrorKind::Version => "version mismatch",
            CheckpointErrorKind::Truncated => "truncated",
            CheckpointErrorKind::ShapeMismatch => "shape mismatch",
        };
        f.write_str(s)
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
