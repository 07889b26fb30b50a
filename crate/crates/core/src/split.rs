//! Deterministic partitioning: train/validation splits and leave-one-out tasks.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};

/// Mixes a base seed with a stream label (splitmix64 finalizer).
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Number of validation items for `n` items: `round(val_fraction * n)`.
pub fn validation_count(n: usize, val_fraction: f64) -> Result<usize> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        bail!(Argument, "validation fraction must lie in (0, 1), got {val_fraction}");
    }
    let val = libm::round(val_fraction * n as f64) as usize;
    if val == 0 || val >= n {
        bail!(
            Argument,
            "splitting {n} items with fraction {val_fraction} leaves an empty partition"
        );
    }
    Ok(val)
}

/// Shuffles `0..n` under `seed` and returns `(train, val)` index lists, each sorted.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let val = validation_count(n, val_fraction)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val_idx = order[..val].to_vec();
    let mut train_idx = order[val..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((train_idx, val_idx))
}

/// For `k` domains, the `(sources, target)` index pairs of the leave-one-out protocol.
pub fn leave_one_out(k: usize) -> Result<Vec<(Vec<usize>, usize)>> {
    if k < 2 {
        bail!(Argument, "leave-one-out needs at least 2 domains, got {k}");
    }
    Ok((0..k).map(|t| ((0..k).filter(|&s| s != t).collect(), t)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_count_split() {
        let (train, val) = split_indices(4800, 0.10, 7).unwrap();
        assert_eq!((train.len(), val.len()), (4320, 480));
    }

    #[test]
    fn same_seed_same_split() {
        assert_eq!(split_indices(10, 0.5, 3).unwrap(), split_indices(10, 0.5, 3).unwrap());
    }

    #[test]
    fn partitions_are_disjoint_and_cover() {
        let (train, val) = split_indices(10, 0.3, 11).unwrap();
        assert_eq!(val.len(), 3);
        let mut seen = [0u8; 10];
        for i in train.iter().chain(&val) {
            seen[*i] += 1;
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn bad_fractions_are_rejected() {
        assert!(split_indices(10, 0.0, 0).is_err());
        assert!(split_indices(10, 1.0, 0).is_err());
        assert!(split_indices(3, 0.1, 0).is_err());
        assert!(split_indices(3, 0.9, 0).is_err());
    }

    #[test]
    fn minimal_leave_one_out() {
        let tasks = leave_one_out(2).unwrap();
        assert_eq!(tasks, alloc::vec![(alloc::vec![1], 0), (alloc::vec![0], 1)]);
        assert!(leave_one_out(1).is_err());
    }

    #[test]
    fn derived_seeds_differ_by_salt() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_eq!(derive_seed(9, 4), derive_seed(9, 4));
    }
}
