//! Polynomial learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// `lr(step) = lr_end + (lr_start - lr_end) * (1 - step / total)^power`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolyDecay {
    pub lr_start: f64,
    pub lr_end: f64,
    pub power: f64,
}

impl Default for PolyDecay {
    fn default() -> Self {
        Self { lr_start: 1e-3, lr_end: 1e-5, power: 1.0 }
    }
}

impl PolyDecay {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            bail!(
                Config,
                "learning rates must satisfy lr_start >= lr_end > 0, got {} and {}",
                self.lr_start,
                self.lr_end
            );
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            bail!(Config, "schedule power must be finite and > 0, got {}", self.power);
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize, total_steps: usize) -> Result<f64> {
        if total_steps == 0 {
            bail!(Argument, "total_steps must be positive");
        }
        if step > total_steps {
            bail!(Argument, "step {step} exceeds total_steps {total_steps}");
        }
        if step == 0 {
            return Ok(self.lr_start);
        }
        let remaining = 1.0 - step as f64 / total_steps as f64;
        let lr = self.lr_end + (self.lr_start - self.lr_end) * libm::pow(remaining, self.power);
        // the endpoint is returned verbatim, so the interior must not round above it
        Ok(lr.min(self.lr_start))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_are_exact() {
        let s = PolyDecay::default();
        assert_eq!(s.lr_at(0, 1000).unwrap(), 1e-3);
        assert_eq!(s.lr_at(1000, 1000).unwrap(), 1e-5);
    }

    #[test]
    fn linear_midpoint() {
        let s = PolyDecay::default();
        assert!((s.lr_at(500, 1000).unwrap() - 5.05e-4).abs() < 1e-15);
    }

    #[test]
    fn zero_total_is_rejected() {
        assert!(matches!(PolyDecay::default().lr_at(0, 0), Err(crate::Error::Argument(_))));
    }
}
