//! Frequency-guided selective KV recomputation with sparse tiered cache
//! offloading, deferred RoPE recovery and roofline-calibrated scheduling.

pub mod cachepool;
pub mod cli;
pub mod error;
pub mod kvcore;
pub mod pipesim;
pub mod rope;
pub mod scheduler;
pub mod spectral;
pub mod toymodel;

pub use error::{Error, Result};
