//! Allocation-only core of the `agridistill` toolkit.
//!
//! Everything in here is pure computation over owned buffers: the
//! distillation and task losses with their analytic gradients, the IoU
//! metric and seed statistics, the learning-rate schedule, deterministic
//! train/validation splitting and the raster augmentation pipeline. IO,
//! the network and the training loops live in the `agridistill` crate.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod augment;
pub mod distill;
pub mod domain;
pub mod error;
pub mod logits;
pub mod metrics;
pub mod raster;
pub mod schedule;
pub mod split;
pub mod stats;

pub use error::{Error, Result};
pub use logits::LogitsMap;
