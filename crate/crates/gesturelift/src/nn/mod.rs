//! Minimal differentiable-network substrate: tensors, the layer kinds the
//! denoiser/lifter/encoder need, reverse-mode gradients through sequential
//! stacks, Adam, and the binary checkpoint format.
//!
//! The scope is deliberately narrow. There is no general autodiff graph;
//! networks are sequences of layers (attention blocks carry their own
//! residual structure), and gradients flow back through an explicit
//! forward trace.

mod checkpoint;
mod layers;
mod network;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{load_params, params_from_bytes, params_to_bytes, save_params};
pub use layers::{Activation, LayerSpec, PaddingMode};
pub use network::{Network, NetworkTrace};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{GradStore, ModelParams};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward called without a matching forward trace")]
    NoForwardState,
    #[error("invalid layer spec: {0}")]
    InvalidSpec(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Receptive field of a stack of 1-D convolutions, in frames:
/// `1 + sum((kernel - 1) * dilation)`.
pub fn receptive_field(conv_stack: &[(usize, usize)]) -> usize {
    1 + conv_stack
        .iter()
        .map(|&(kernel, dilation)| (kernel - 1) * dilation)
        .sum::<usize>()
}
