//! Selective write-verify for quantized DNN weights mapped onto
//! variation-prone non-volatile compute-in-memory devices.
//!
//! The pipeline: train (quantization-aware) → quantize and split each weight
//! across K-bit devices → bulk-program with device noise → rank weights by
//! sensitivity (diagonal second derivative times the device-dependent noise
//! variance) → write-verify in rank order while tracking write cycles.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x >= 0.0)` also rejects NaN

pub mod dataio;
pub mod device;
pub mod error;
pub mod harness;
pub mod nngraph;
pub mod rng;
pub mod sensitivity;
pub mod stats;
pub mod strategy;
pub mod writeverify;

pub mod cli;

pub use error::{Error, Result};
