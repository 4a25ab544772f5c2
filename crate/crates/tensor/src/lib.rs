//! Dense tensor engine with reverse-mode automatic differentiation.
//!
//! Operations on [`Tape`] record a linear computation graph during the
//! forward pass; [`Tape::backward`] replays it in reverse to accumulate
//! gradients for every tensor that requires them. The op set is the minimum
//! needed for tabular MLP / ResNet / transformer models: matmul, broadcast
//! add, activations, softmax, layer/batch normalization, dropout, embedding
//! lookup, concatenation, reductions, and the classification losses.
//!
//! Precision is generic over [`Real`] (f32 for training, f64 for
//! finite-difference verification). All kernels are sequential with a fixed
//! reduction order, so results are bit-reproducible for fixed inputs.

mod adamw;
mod checkpoint;
pub mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use adamw::{AdamWConfig, AdamWState};
pub use checkpoint::{CheckpointFile, TensorEntry, CHECKPOINT_VERSION};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;

use std::fmt::{Debug, Display};

/// Element type of tensors: f32 or f64.
pub trait Real:
    num_traits::Float + Debug + Display + Default + Send + Sync + 'static
{
    const DTYPE: &'static str;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";

    fn from_f64(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("`{op}`: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGrad(String),
    #[error("optimizer state shape mismatch for `{0}`")]
    StateShapeMismatch(String),
    #[error("checkpoint i/o: {0}")]
    CheckpointIo(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
