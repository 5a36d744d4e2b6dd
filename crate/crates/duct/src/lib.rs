//! Desk-scale domain-incremental learning via dual consolidation.
//!
//! The pipeline trains a small tanh MLP on a stream of synthetically shifted
//! domains sharing one label space, merges the per-domain fine-tunes into a
//! single backbone through similarity-weighted task-vector addition, and
//! calibrates old classifier blocks by transporting the freshly retrained
//! head along an entropic optimal-transport plan between class centers.
//!
//! Start with the runnable examples (`cargo run --example full_pipeline`)
//! or the `duct` binary for config-driven experiments.

// The numeric kernels iterate by index across several parallel buffers at
// once; iterator rewrites obscure which buffer each index addresses.
#![allow(clippy::needless_range_loop)]

pub mod checkpoint;
pub mod consolidate;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod numkit;
pub mod train;
pub mod transport;

pub use error::{DuctError, Result};
