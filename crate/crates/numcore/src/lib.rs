//! Minimal differentiable numeric substrate.
//!
//! Tensors are dense and row-major. Graphs are rebuilt for each forward pass
//! and differentiated in reverse; [`eval_and_grad`] wraps the common
//! "bind parameters, build loss, backprop" cycle and [`adam_step`] applies
//! the update.

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod params;
mod real;
mod tensor;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, save_checkpoint, CheckpointMeta};
pub use error::{NumError, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{adam_step, eval_and_grad, AdamState, Grads, ParamSet, ParamVars};
pub use real::Real;
pub use tensor::Tensor;
