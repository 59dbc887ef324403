use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("bundle has no tensor with role `{role}`{}", .name.as_ref().map(|n| format!(" (expected `{n}`)")).unwrap_or_default())]
    MissingTensor { role: String, name: Option<String> },

    #[error("manifest parse error: {0}")]
    ManifestParse(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("tensor `{name}` contains a non-finite value at flat index {index}")]
    NonFiniteValue { name: String, index: usize },

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("within-class scatter is singular; use a positive shrinkage")]
    SingularScatter,

    #[error("ADMM system matrix is not positive definite even after raising rho to {rho}")]
    IndefiniteSystem { rho: f64 },

    #[error("group {0} is empty")]
    EmptyGroup(usize),

    #[error("moving channel {channel} would empty group {group}")]
    WouldEmptyGroup { channel: usize, group: usize },

    #[error("cannot score a zero vector")]
    ZeroVector,

    #[error("empty evaluation set")]
    EmptySet,

    #[error("I/O error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn invariant(msg: impl Into<String>) -> Self {
        Error::InvariantViolation(msg.into())
    }

    /// Process exit code used by the command-line tool.
    ///
    /// 2 missing input, 3 shape mismatch, 4 internal invariant violation,
    /// 5 I/O failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingFile(_) | Error::MissingTensor { .. } => 2,
            Error::ShapeMismatch(_)
            | Error::LengthMismatch { .. }
            | Error::IndexOutOfRange { .. }
            | Error::TooFewSamples { .. } => 3,
            Error::Io { .. } => 5,
            _ => 4,
        }
    }
}
