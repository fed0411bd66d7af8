//! Minimal reverse-mode automatic differentiation for small recurrent
//! convolutional networks.
//!
//! The crate is organised around a per-example [`Graph`] (a tape) that
//! borrows a slice of parameter tensors. Forward ops are recorded as they
//! are built; [`Graph::backward`] walks the tape once in reverse and
//! accumulates gradients. Everything is generic over [`Scalar`] so that
//! the same code runs in `f32` for training and in `f64` for gradient
//! checking.

mod error;
mod graph;
mod kernels;
mod scalar;
mod tensor;

pub mod check;
pub mod init;
pub mod optim;

pub use error::NnError;
pub use graph::{Graph, NodeGrads, NodeId};
pub use kernels::{argmax, softmax_in_place};
pub use optim::{Optimizer, OptimizerKind};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Result<T, E = NnError> = std::result::Result<T, E>;
