//! Cross-task affinity learning (CTAL) and the EMA-Net multitask decoder,
//! built on a small reverse-mode autodiff core.
//!
//! Every numeric component is generic over [`Scalar`] (`f32` or `f64`).
//! Training paths use `f32`; gradient checks run in `f64`. The aliases at
//! the crate root name the two instantiations.

pub mod ctal;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod network;
pub mod resources;
pub mod scalar;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type EmaNet32 = network::EmaNet<f32>;
pub type EmaNet64 = network::EmaNet<f64>;
