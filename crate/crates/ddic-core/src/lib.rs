//! Deep clustering of feature-incomplete data with optimal-transport losses.
//!
//! The pipeline implemented here: generate or accept a missing-entry mask,
//! fill the gaps with a simple statistical imputation, pretrain an MLP
//! autoencoder under a debiased Sinkhorn-divergence reconstruction loss,
//! initialize cluster centroids with k-means on the embeddings, then jointly
//! fine-tune the network and centroids with an added KL self-training
//! clustering term until hard assignments stabilize. The final decoder output
//! provides imputations for the missing entries.
//!
//! Module layout:
//! - [`tensor`]: dense `f64` matrices and a reverse-mode autodiff tape.
//! - [`ot`]: log-domain Sinkhorn solver, debiased divergence, and its
//!   autodiff-traced variant used as a training loss.
//! - [`incomplete`]: masks, observed matrices, statistical fills.
//! - [`dec`]: autoencoder, soft/hard assignments, target distribution, losses.
//! - [`trainer`]: k-means, Adam, pretraining, and the full fit loop.
//! - [`eval`]: clustering accuracy (Hungarian matching), NMI, purity,
//!   mean/std aggregation.
//!
//! The crate is `no_std`-compatible (requires `alloc`); the default `std`
//! feature only switches math intrinsics and enables runtime CPU detection in
//! the matmul backend. File IO, CSV/IDX parsing, and the CLI live in the
//! companion `ddic` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod dec;
pub mod error;
pub mod eval;
pub mod incomplete;
mod math;
pub mod ot;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::CoreError;
pub use tensor::{Matrix, NodeId, Tape};
