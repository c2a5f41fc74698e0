//! Dense tensors, a reverse-mode differentiation tape, Adam, seeded random
//! streams, checkpoints and a finite-difference gradient oracle.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod params;
mod rng;
mod scalar;
mod tape;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig};
pub use checkpoint::{Checkpoint, CheckpointError, NamedArray, CONFIG_ARRAY};
pub use params::{ParamId, ParamStore, Parameter};
pub use rng::Rng;
pub use scalar::{gemm, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data of length {len} does not fill shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    BadAxis { op: &'static str, axis: usize, rank: usize },
    #[error("{op}: range {start}..{end} out of bounds for length {len}")]
    BadRange {
        op: &'static str,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{0}: non-finite value produced")]
    NonFinite(&'static str),
    #[error("{0}: empty input")]
    EmptyInput(&'static str),
    #[error("duplicate parameter name {0}")]
    DuplicateParameter(String),
}

#[cfg(test)]
mod tape_tests;
