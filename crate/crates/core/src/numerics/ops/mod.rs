//! Differentiable primitives. Each submodule adds methods on [`Tensor`].
//!
//! [`Tensor`]: crate::numerics::Tensor

pub mod conv;
pub mod elementwise;
pub mod matmul;
pub mod norm;
pub mod reduce;
pub mod shape;

pub use conv::Conv2dGeometry;
pub use norm::BatchStats;
