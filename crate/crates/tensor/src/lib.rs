//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Values live in a [`Graph`]; every primitive applied to a [`Var`] records
//! a node and its local gradient rule. [`Graph::backward`] sweeps the tape in
//! reverse creation order.

pub mod error;
pub mod graph;
pub mod nn;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{concat, Gradients, Graph, Var, GELU_CUBIC, GELU_SQRT_2_OVER_PI};
pub use nn::{attention, Mask};
pub use tensor::{broadcast_shape, Tensor, DUMP_MAGIC};
