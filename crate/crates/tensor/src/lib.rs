//! A small reverse-mode automatic differentiation engine for CPU tensors.
//!
//! Tensors are generic over [`Float`]: `f32` is the training precision and
//! `f64` the verification precision used by [`gradcheck`].

mod error;
mod float;
pub mod gradcheck;
pub mod init;
mod ops;
pub mod optim;
mod tensor;

pub use error::{Result, TensorError};
pub use float::{Float, Precision};
pub use ops::{log_softmax, sigmoid};
pub use optim::{adam_step, zero_grads, AdamConfig, AdamState};
pub use tensor::{grad_enabled, no_grad, numel, Tensor};
