//! Video shadow detection over clipped sequences: dual-scale temporal
//! affinity aggregation, shadow-boundary-aware attention, and a
//! timeline-guided bit-analog diffusion mask decoder, with a synthetic
//! moving-shadow data path and a train/eval/infer harness.
//!
//! Everything runs in 64-bit arithmetic on the CPU and is deterministic
//! given a seed: the same configuration reproduces checkpoints, loss logs,
//! and output masks bit for bit.

pub mod clip_data;
pub mod diffusion;
pub mod dsa;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod sbaa;
pub mod tensor;

pub use error::{Error, Result};
