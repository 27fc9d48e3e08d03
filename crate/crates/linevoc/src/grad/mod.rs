//! Minimal differentiable-computation substrate.
//!
//! Value arrays with shapes, a fixed op set with reverse-mode gradients,
//! gradient detachment, a finite-difference checker, and a named-parameter
//! checkpoint container. Training runs at `f32`; the checker instantiates the
//! same generic code at `f64`.

pub mod check;
pub mod checkpoint;
mod graph;
mod scalar;
mod tensor;

pub use graph::{Graph, Node};
pub use scalar::Scalar;
pub use tensor::{Param, Parameterized, Tensor};
