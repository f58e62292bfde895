//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument to {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("cannot normalize a vector with L2 norm below 1e-12")]
    ZeroNorm,

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("loss does not depend on any tracked parameter")]
    DetachedGraph,

    #[error("backward was already run on this graph; build a fresh graph per step")]
    BackwardAlreadyRun,

    #[error("non-finite gradient passed to the optimizer (parameter index {index})")]
    NanGradient { index: usize },

    #[error("training diverged: non-finite loss at {context}")]
    NanLoss { context: String },

    #[error("checkpoint format version {found} is unsupported (expected {expected})")]
    VersionMismatch { found: i64, expected: i64 },

    #[error("malformed file {path}: {msg}")]
    MalformedFile { path: String, msg: String },

    #[error("invalid configuration:\n{}", violations.join("\n"))]
    InvalidConfig { violations: Vec<String> },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn malformed(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::MalformedFile {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
