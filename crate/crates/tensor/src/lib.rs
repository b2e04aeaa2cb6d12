//! Dense row-major tensors with a recorded operation graph for reverse-mode
//! differentiation, a named parameter store with Adam, and the `IMCK1`
//! checkpoint format.
//!
//! Everything is generic over [`Real`] so the same network code runs in
//! 32-bit for training and 64-bit for finite-difference verification.

mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
mod real;
mod store;
mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use error::{Result, TensorError};
pub use graph::{Activation, CustomOp, Graph, Var};
pub use real::{Precision, Real};
pub use store::{AdamConfig, ParamStore};
pub use tensor::Tensor;
