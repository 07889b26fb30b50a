//! Feature-statistics operators applied at backbone hook points.

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};

use super::layers::instance_moments;
use crate::error::{Error, Result};

/// Removes per-instance, per-channel first and second moments; no affine.
pub fn unistyle_whiten(features: &Tensor) -> Result<Tensor> {
    let (mean, std) = instance_moments(features)?;
    Ok(features.broadcast_sub(&mean)?.broadcast_div(&std)?)
}

/// Re-standardizes instance `i` to the channel statistics of instance `perm[i]`.
pub fn padain_apply(features: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let b = features.dim(0)?;
    if perm.len() != b {
        return Err(Error::Argument(format!("permutation of length {} for batch {b}", perm.len())));
    }
    let mut seen = vec![false; b];
    for &p in perm {
        if p >= b || std::mem::replace(&mut seen[p], true) {
            return Err(Error::Argument(format!("{perm:?} is not a permutation of 0..{b}")));
        }
    }
    let (mean, std) = instance_moments(features)?;
    let idx = Tensor::from_vec(perm.iter().map(|&p| p as u32).collect::<Vec<_>>(), b, features.device())?;
    let target_mean = mean.index_select(&idx, 0)?;
    let target_std = std.index_select(&idx, 0)?;
    Ok(features
        .broadcast_sub(&mean)?
        .broadcast_div(&std)?
        .broadcast_mul(&target_std)?
        .broadcast_add(&target_mean)?)
}

/// Permuted AdaIN: with probability `prob`, swaps instance statistics
/// along a random batch permutation. Identity in evaluation mode and for
/// single-instance batches. Returns the permutation when a swap happened.
pub fn padain_swap(
    features: &Tensor,
    prob: f64,
    rng: Option<&mut dyn RngCore>,
) -> Result<(Tensor, Option<Vec<usize>>)> {
    let Some(rng) = rng else {
        return Ok((features.clone(), None));
    };
    if prob <= 0.0 || !rng.random_bool(prob.min(1.0)) {
        return Ok((features.clone(), None));
    }
    let b = features.dim(0)?;
    if b < 2 {
        return Ok((features.clone(), None));
    }
    let mut perm: Vec<usize> = (0..b).collect();
    perm.shuffle(rng);
    Ok((padain_apply(features, &perm)?, Some(perm)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn features() -> Tensor {
        let v: Vec<f32> = (0..2 * 3 * 4 * 4).map(|i| ((i * 37 % 23) as f32) * 0.3 - 2.0).collect();
        Tensor::from_vec(v, (2, 3, 4, 4), &Device::Cpu).unwrap()
    }

    #[test]
    fn zero_probability_is_identity() {
        let x = features();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (y, perm) = padain_swap(&x, 0.0, Some(&mut rng)).unwrap();
        assert!(perm.is_none());
        let diff = (y - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn eval_mode_is_identity() {
        let x = features();
        let (y, perm) = padain_swap(&x, 1.0, None).unwrap();
        assert!(perm.is_none());
        let diff = (y - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn single_instance_batch_is_untouched() {
        let x = features().narrow(0, 0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, perm) = padain_swap(&x, 1.0, Some(&mut rng)).unwrap();
        assert!(perm.is_none());
    }

    #[test]
    fn invalid_permutations_are_rejected() {
        assert!(padain_apply(&features(), &[0, 0]).is_err());
        assert!(padain_apply(&features(), &[0]).is_err());
    }

    #[test]
    fn constant_channel_whitens_to_zero() {
        let x = Tensor::full(3.5f32, (1, 2, 3, 3), &Device::Cpu).unwrap();
        let y = unistyle_whiten(&x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(y, 0.0);
    }
}
