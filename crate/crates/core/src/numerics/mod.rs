//! Tensor, autodiff, optimizers and checkpointing.

pub mod checkpoint;
pub mod element;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod param;
pub mod rng;
pub mod tensor;

pub use element::{DType, Element};
pub use ops::{BatchStats, Conv2dGeometry};
pub use param::Param;
pub use tensor::{is_grad_enabled, no_grad, Tensor, TensorError};
