//! Dense tensors, reverse-mode differentiation, optimization and gradient
//! checking.

pub mod adam;
pub mod dropout;
pub mod gradcheck;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use dropout::dropout;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use rng::{RngState, RngStream};
pub use tape::{gelu_scalar, Gradients, Tape, Var};
pub use tensor::Tensor;
