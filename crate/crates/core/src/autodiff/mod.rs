//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! Operations are recorded on a [`Graph`] tape as they execute; a node is
//! recorded with its backward rule only when some input tracks gradients.
//! [`Graph::backward`] sweeps the tape in reverse creation order, so every
//! node has received all consumer contributions before its own rule fires,
//! and accumulation order is fixed.

mod audit;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use audit::{audit, AuditEntry};
pub use gradcheck::{grad_check, grad_check_coords, GradCheckReport};
pub use graph::{concat, Gradients, Graph, Var};
pub use tensor::Tensor;
