//! A small reverse-mode tensor engine.
//!
//! Values are row-major `f64` arrays ([`Tensor`]). Computations are
//! recorded on a [`Graph`] tape as they run; [`Graph::backward`] walks the
//! tape in reverse and accumulates gradients for every node that depends
//! on a differentiable leaf.

mod checkpoint;
mod conv;
mod graph;
mod gradcheck;
mod tensor;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use conv::{conv_forward, ConvSpec};
pub use graph::{Graph, Var};
pub use gradcheck::{grad_check, grad_check_indices, relative_error};
pub use tensor::Tensor;
