//! Dense tensors, a reverse-mode gradient tape, Adam, and checkpoints.

mod adam;
mod checkpoint;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState, DEFAULT_LEARNING_RATE};
pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use params::ParamSet;
pub use tape::{Gradients, SparseRows, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rank of {shape:?} exceeds 2")]
    Rank { shape: Vec<usize> },
    #[error("rows have different lengths")]
    Ragged,
    #[error("{op}: segments must tile the rows contiguously")]
    Segments { op: &'static str },
    #[error("backward root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("{params} parameters but {grads} gradients")]
    ParamCount { params: usize, grads: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
