//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar output walks the record in reverse and
//! returns [`Gradients`] for every node that depends on a trainable leaf.

mod gradcheck;
mod kernels;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use ops::{
    BatchNormStats, Elementwise, Mode, ARC_CLAMP, BATCHNORM_EPS, BATCHNORM_MOMENTUM, NORM_FLOOR,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
