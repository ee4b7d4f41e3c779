use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("payload mismatch: expected {expected} bytes, found {found}")]
    PayloadMismatch { expected: usize, found: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("coverage gap at pixel ({row}, {col})")]
    CoverageGap { row: usize, col: usize },
    #[error("not enough candidates: need {needed}, window holds {available}")]
    NotEnoughCandidates { needed: usize, available: usize },
    #[error("factorization failed: {0}")]
    Factorization(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("no training images found in {0}")]
    EmptyData(PathBuf),
    #[error("config error: {0}")]
    Config(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable code, used by the CLI's `error: <code>: <message>` line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::UnsupportedFormat(_) => "unsupported-format",
            Error::MalformedHeader(_) => "malformed-header",
            Error::PayloadMismatch { .. } => "payload-mismatch",
            Error::DimensionMismatch(_) => "dimension-mismatch",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::CoverageGap { .. } => "coverage-gap",
            Error::NotEnoughCandidates { .. } => "not-enough-candidates",
            Error::Factorization(_) => "factorization",
            Error::NonFinite(_) => "non-finite",
            Error::CheckpointMismatch(_) => "ckpt-mismatch",
            Error::BadCheckpoint(_) => "bad-checkpoint",
            Error::EmptyData(_) => "empty-data",
            Error::Config(_) => "config",
            Error::GradCheck(_) => "grad-check",
        }
    }
}
