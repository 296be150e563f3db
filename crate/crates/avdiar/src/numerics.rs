//! Numeric substrate: tensors, reverse-mode autodiff, optimization, seeded
//! initialization, parameter serialization, and gradient checking.
//!
//! Everything here is generic over [`scalar::Scalar`] so the same code runs in
//! `f32` or `f64`; the crate-root aliases pin `f64` for the actual pipeline.

pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;

use thiserror::Error;

/// Errors raised by tensor construction, graph ops, and parameter handling.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op} expects {expect}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expect: &'static str,
        got: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("unknown parameter {name:?}")]
    UnknownParam { name: String },
    #[error("parameter {name:?} has no gradient")]
    MissingGradient { name: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("row index {index} out of range for {rows} rows")]
    RowOutOfRange { index: usize, rows: usize },
    #[error("checkpoint I/O failed: {0}")]
    Io(String),
    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),
}
