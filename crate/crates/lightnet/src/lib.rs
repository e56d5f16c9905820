//! Additive-decay linear attention at desk scale: 1D linear-recurrence
//! theory, causal and non-causal attention scans, multi-dimensional
//! positional encodings, a minimal reverse-mode tensor library to drive and
//! verify them, and a timing harness for the one-scan/two-scan comparison.

pub mod bench;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod lna;
pub mod model;
pub mod posenc;
pub mod recurrence;
pub mod rng;
pub mod scan;
pub mod suites;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{DType, Scalar, Tensor};
