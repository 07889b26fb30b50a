//! Multi-teacher knowledge distillation for domain-generalized crop
//! segmentation: data handling, network, training, benchmarking and reports.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datamodel;
pub mod error;
pub mod evaluate;
pub mod network;
pub mod pipeline;
pub mod report;
pub mod toydata;
pub mod train;

pub use error::{Error, Result};

/// 64-bit FNV-1a digest.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}
