//! Matrix product state models for Born-rule sequence modeling.
//!
//! The crate covers dense and factored-core MPS models over spin-1 Motzkin
//! chains, an MLP baseline, SGD training with exact probability-mass metrics,
//! and the file formats used by the `tnmps` command-line tool.

pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod factored;
pub mod motzkin;
pub mod mps;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
