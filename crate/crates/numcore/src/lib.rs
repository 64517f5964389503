//! Dense row-major tensors with a tape-based reverse-mode differentiation
//! engine, an Adam optimizer with decoupled weight decay, and a flat binary
//! checkpoint format.
//!
//! Everything is generic over [`Scalar`] so the same model code can run in
//! `f32` for training and in `f64` for finite-difference gradient checks.

mod adam;
mod checkpoint;
mod error;
mod gradcheck;
mod graph;
pub mod init;
mod params;
mod scalar;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, TensorEntry};
pub use error::{NumError, Result};
pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
