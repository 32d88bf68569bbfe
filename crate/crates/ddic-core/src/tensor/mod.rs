//! Dense matrices and reverse-mode automatic differentiation.
//!
//! [`Matrix`] is a plain row-major `f64` container with the arithmetic the
//! rest of the crate needs. [`Tape`] records a computation over matrices and
//! produces exact gradients for every recorded input on [`Tape::backward`].
//! [`grad_check`] compares those gradients against central finite differences.

pub(crate) mod kernels;
mod matrix;
mod tape;

pub use matrix::{logsumexp_rows, pairwise_sq_dists, Matrix};
pub use tape::{grad_check, NodeId, Tape};
