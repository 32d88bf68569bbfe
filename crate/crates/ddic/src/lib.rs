//! Dataset IO, experiment orchestration, and result serialization around
//! the `ddic-core` clustering engine.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;

pub use error::{Error, Result};
