//! Training and evaluation engine for audio-visual speaker verification.

pub mod autodiff;
mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod scalar;
pub mod train;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, ErrorKind, Result};
pub use scalar::Scalar;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
