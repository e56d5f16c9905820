//! Error type shared across the library.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument for {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("axis {axis} out of range for rank-{rank} tensor")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("{op}: input size {n} exceeds guard limit {limit}")]
    GuardLimit {
        op: &'static str,
        n: usize,
        limit: usize,
    },
    #[error("non-finite value encountered in {op}")]
    NonFinite { op: &'static str },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config mismatch: field `{field}` differs (checkpoint: {expected}, requested: {actual})")]
    ConfigMismatch {
        field: &'static str,
        expected: String,
        actual: String,
    },
    #[error("training diverged at step {step}: loss is not finite")]
    NonFiniteLoss { step: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
