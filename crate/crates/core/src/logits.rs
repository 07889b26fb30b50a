use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};

/// Raw per-pixel scores of one sample: `channels` maps of `height x width`.
///
/// Storage is channel-major (`c * height * width + y * width + x`), so one
/// channel's spatial map is a contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsMap {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl LogitsMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            bail!(Shape, "logits dims must be positive, got {channels}x{height}x{width}");
        }
        if values.len() != channels * height * width {
            bail!(
                Shape,
                "expected {} values for {channels}x{height}x{width}, got {}",
                channels * height * width,
                values.len()
            );
        }
        Ok(Self { channels, height, width, values })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, values: vec![0.0; channels * height * width] }
    }

    pub fn from_f32(channels: usize, height: usize, width: usize, values: &[f32]) -> Result<Self> {
        Self::new(channels, height, width, values.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of spatial positions, `height * width`.
    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.positions();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.positions();
        &mut self.values[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.dims() == other.dims()
    }

    pub(crate) fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if !self.same_shape(other) {
            bail!(Shape, "{what}: {:?} vs {:?}", self.dims(), other.dims());
        }
        Ok(())
    }

    pub(crate) fn check_finite(&self, what: &str) -> Result<()> {
        if let Some(pos) = self.values.iter().position(|v| !v.is_finite()) {
            bail!(Numeric, "{what}: non-finite logit at flat index {pos}");
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { values: self.values.iter().map(|&v| f(v)).collect(), ..*self }
    }
}
