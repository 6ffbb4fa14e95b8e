//! Context-aware meta co-training for a compact causal action decoder.
//!
//! The crate is organized bottom-up:
//!
//! - [`diffcore`]: tensors, the reverse-mode record, Adam and the
//!   finite-difference oracle.
//! - [`nets`]: attention, transformer blocks and the action-decoder backbone.
//! - [`mar`]: the context memory module (deterministic and latent paths,
//!   fusion, variational objective).
//! - [`banks`]: synthetic task suites, episodes, action tokenization and the
//!   context/target banks.
//! - [`trainer`]: the co-training loop for every training regime, metrics and
//!   checkpoints.
//! - [`evalharness`]: held-out success rate, experiment grids, latency and the
//!   command-line entry point.

pub mod banks;
pub mod diffcore;
pub mod error;
pub mod evalharness;
pub mod mar;
pub mod nets;
pub mod seeds;
pub mod trainer;

pub use error::{Error, Result};
