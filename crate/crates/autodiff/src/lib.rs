//! Minimal dense-tensor compute core with reverse-mode differentiation.
//!
//! Values live in a [`Graph`] tape: every op appends a node holding its output
//! and whatever it needs to run backward. [`Graph::backward`] walks the tape in
//! reverse insertion order and accumulates gradients additively, so a tensor
//! consumed by several ops receives the sum of all contributions.
//!
//! The element type is [`Real`], `f32` by default. Building with the `f64`
//! feature switches it to double precision for the tight gradient-check runs.

mod checkpoint;
mod error;
mod gemm;
mod graph;
pub mod nn;
mod ops;
pub mod optim;
mod tensor;

pub mod gradcheck;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use error::{CheckpointError, TensorError};
pub use graph::{Graph, Var};
pub use nn::{ParamId, ParamStore};
pub use ops::arith::sigmoid;
pub use ops::loss::bce_with_logits;
pub use tensor::Tensor;

#[cfg(not(feature = "f64"))]
pub type Real = f32;
#[cfg(feature = "f64")]
pub type Real = f64;
