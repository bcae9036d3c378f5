//! Error type shared by every module in the toolkit.

use std::fmt;

/// Unified error enum. Categories are kept distinct so callers (notably the
/// CLI) can map them to stable exit codes.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A tensor or parameter dimension violates an operation's contract.
    /// `op` names the operation, `detail` names the offending dimension.
    ShapeMismatch { op: &'static str, detail: String },
    /// A scalar argument is outside its documented range.
    InvalidArgument { op: &'static str, detail: String },
    /// A probability row failed validation (negative entry or bad sum).
    InvalidDistribution { op: &'static str, row: usize, detail: String },
    /// Non-finite value where finite arithmetic is required.
    NonFinite { op: &'static str, detail: String },
    /// Checkpoint bytes are malformed: bad magic, truncation, trailing data.
    CheckpointFormat(String),
    /// Checkpoint version is not readable by this build.
    CheckpointVersion { found: u32, supported: u32 },
    /// Checkpoint record does not match the current network's parameters.
    CheckpointShape(String),
    /// Run or stage configuration is unusable.
    Config(String),
    /// Training loss left the finite/bounded regime.
    Divergence {
        loss: f64,
        last_checkpoint: Option<String>,
    },
    /// Filesystem or codec failure, wrapping the offending path.
    Io { path: String, detail: String },
    /// An internal consistency check failed (e.g. Hermitian symmetry residue).
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Error::InvalidArgument { op, detail } => write!(f, "{op}: invalid argument: {detail}"),
            Error::InvalidDistribution { op, row, detail } => {
                write!(f, "{op}: invalid distribution at row {row}: {detail}")
            }
            Error::NonFinite { op, detail } => write!(f, "{op}: non-finite value: {detail}"),
            Error::CheckpointFormat(detail) => write!(f, "checkpoint format error: {detail}"),
            Error::CheckpointVersion { found, supported } => write!(
                f,
                "checkpoint version {found} not supported (this build reads version {supported})"
            ),
            Error::CheckpointShape(detail) => write!(f, "checkpoint shape error: {detail}"),
            Error::Config(detail) => write!(f, "configuration error: {detail}"),
            Error::Divergence { loss, last_checkpoint } => match last_checkpoint {
                Some(path) => write!(
                    f,
                    "training diverged (loss {loss}); last good checkpoint: {path}"
                ),
                None => write!(f, "training diverged (loss {loss}); no checkpoint written yet"),
            },
            Error::Io { path, detail } => write!(f, "io error on {path}: {detail}"),
            Error::Internal(detail) => write!(f, "internal error: {detail}"),
        }
    }
}

impl std::error::Error for Error {}

impl Error {
    /// Helper to wrap a `std::io::Error` with the path it concerned.
    pub fn io(path: impl AsRef<std::path::Path>, err: impl fmt::Display) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            detail: err.to_string(),
        }
    }
}
