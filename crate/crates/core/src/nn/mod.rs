//! Reverse-mode automatic differentiation over dense `f64` matrices, and the
//! layers the surface-current model is built from.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters live in
//! a [`ParameterStore`] and enter a tape by id; after [`Tape::backward`] the
//! returned [`Gradients`] are folded into the store's accumulators.

mod gradcheck;
mod layers;
mod optim;
mod store;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{check_gradients, GradCheck, FD_ABS_FLOOR};
pub use layers::{
    BatchNorm, EdgeIndex, Ffn2, GatLayer, GcnLayer, GraphTensors, KernelPointGeometry, KpConv, Linear,
    MultiHeadAttention,
};
pub use optim::Adam;
pub use store::{ParamId, Parameter, ParameterStore};
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("backward called twice on the same tape")]
    DoubleBackward,
    #[error("loss must be a 1x1 tensor, got {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
    #[error("batch normalization in training mode needs at least two rows, got {0}")]
    BatchTooSmall(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
