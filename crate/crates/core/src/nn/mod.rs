//! Minimal differentiable numerics: tensors, 2D convolution, window pooling,
//! dense layers, reverse-mode gradients over that fixed op set, and ADAM.

mod adam;
pub mod checkpoint;
pub mod kernels;
mod layers;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use kernels::PoolMode;
pub use layers::{avg_pool2d_forward, conv2d_forward, glorot_uniform, mlp_forward, Activation, ConvKernel, MlpLayer};
pub use tape::{ScalarFunction, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter {0} has no gradient")]
    MissingGrad(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
