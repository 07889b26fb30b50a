//! Thresholded intersection-over-union.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::raster::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IoUConfig {
    pub confidence_threshold: f64,
}

impl Default for IoUConfig {
    fn default() -> Self {
        Self { confidence_threshold: 0.9 }
    }
}

impl IoUConfig {
    pub fn new(confidence_threshold: f64) -> Result<Self> {
        let cfg = Self { confidence_threshold };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.confidence_threshold;
        if !(t > 0.0 && t < 1.0) {
            bail!(Config, "confidence threshold must lie strictly inside (0, 1), got {t}");
        }
        Ok(())
    }
}

/// Intersection and union counts after binarizing `probabilities >= threshold`.
pub fn confusion(probabilities: &[f64], mask: &Mask, cfg: &IoUConfig) -> Result<(usize, usize)> {
    if probabilities.len() != mask.data().len() {
        bail!(
            Shape,
            "{} probabilities for a {}x{} mask",
            probabilities.len(),
            mask.width(),
            mask.height()
        );
    }
    let mut inter = 0;
    let mut union = 0;
    for (&p, &m) in probabilities.iter().zip(mask.data()) {
        let pred = p >= cfg.confidence_threshold;
        let truth = m == 1;
        inter += usize::from(pred && truth);
        union += usize::from(pred || truth);
    }
    Ok((inter, union))
}

/// IoU of the binarized prediction against the mask. Two empty sets score 1.
pub fn iou(probabilities: &[f64], mask: &Mask, cfg: &IoUConfig) -> Result<f64> {
    let (inter, union) = confusion(probabilities, mask, cfg)?;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn hand_enumerated_case() {
        let mask = Mask::new(2, 2, vec![1, 0, 0, 0]).unwrap();
        let v = iou(&[0.95, 0.2, 0.91, 0.1], &mask, &IoUConfig::default()).unwrap();
        assert_eq!(v, 0.5);
    }

    #[test]
    fn both_empty_scores_one() {
        let mask = Mask::zeros(3, 2);
        assert_eq!(iou(&[0.05; 6], &mask, &IoUConfig::default()).unwrap(), 1.0);
    }

    #[test]
    fn exact_prediction_scores_one() {
        let mask = Mask::new(2, 1, vec![1, 0]).unwrap();
        assert_eq!(iou(&[1.0, 0.0], &mask, &IoUConfig::default()).unwrap(), 1.0);
    }

    #[test]
    fn empty_prediction_against_foreground_scores_zero() {
        let mask = Mask::new(2, 1, vec![1, 0]).unwrap();
        assert_eq!(iou(&[0.0, 0.0], &mask, &IoUConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mask = Mask::zeros(2, 2);
        assert!(matches!(iou(&[0.0; 3], &mask, &IoUConfig::default()), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn threshold_must_be_inside_unit_interval() {
        assert!(IoUConfig::new(1.0).is_err());
        assert!(IoUConfig::new(0.0).is_err());
        assert!(IoUConfig::new(0.5).is_ok());
    }
}
