//! Two-branch LR-ASPP segmentation head.

use candle_core::Tensor;

use super::layers::{resize_bilinear, BatchNorm, Conv1x1, ParamRegistry};
use super::FeaturePyramid;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LrAspp {
    cbr_conv: Conv1x1,
    cbr_norm: BatchNorm,
    scale_conv: Conv1x1,
    high_classifier: Conv1x1,
    low_classifier: Conv1x1,
}

/// Intermediate values of one head evaluation.
#[derive(Debug, Clone)]
pub struct HeadParts {
    /// Channel attention `(B, inter, 1, 1)` in `(0, 1)`.
    pub attention: Tensor,
    /// Deep features after conv + BN + ReLU, before attention.
    pub deep_features: Tensor,
    /// Attended deep branch projected to the output channels, at 1/8 resolution.
    pub deep_branch: Tensor,
    /// Mid-level branch projected to the output channels, at 1/8 resolution.
    pub mid_branch: Tensor,
    /// Sum of both branches resized to the input resolution.
    pub logits: Tensor,
}

impl LrAspp {
    pub fn new(
        reg: &mut ParamRegistry,
        mid_channels: usize,
        deep_channels: usize,
        inter: usize,
        num_classes: usize,
    ) -> Result<Self> {
        reg.push("head");
        let head = Self {
            cbr_conv: Conv1x1::new(reg, "cbr_conv", deep_channels, inter, false)?,
            cbr_norm: BatchNorm::new(reg, "cbr_norm", inter)?,
            scale_conv: Conv1x1::new(reg, "scale_conv", deep_channels, inter, true)?,
            high_classifier: Conv1x1::new(reg, "high_classifier", inter, num_classes, true)?,
            low_classifier: Conv1x1::new(reg, "low_classifier", mid_channels, num_classes, true)?,
        };
        reg.pop();
        Ok(head)
    }

    pub fn forward(&self, pyramid: &FeaturePyramid, size: (usize, usize), training: bool) -> Result<Tensor> {
        Ok(self.forward_parts(pyramid, size, training, None)?.logits)
    }

    /// Runs the head; `attention_override` replaces the computed channel attention.
    pub fn forward_parts(
        &self,
        pyramid: &FeaturePyramid,
        (height, width): (usize, usize),
        training: bool,
        attention_override: Option<&Tensor>,
    ) -> Result<HeadParts> {
        let deep = &pyramid.deep;
        let deep_features = self.cbr_norm.forward(&self.cbr_conv.forward(deep)?, training)?.relu()?;
        let attention = match attention_override {
            Some(a) => a.clone(),
            None => candle_nn::ops::sigmoid(&self.scale_conv.forward(&deep.mean_keepdim((2, 3))?)?)?,
        };
        let attended = deep_features.broadcast_mul(&attention)?;
        let (_, _, mh, mw) = pyramid.mid.dims4()?;
        let deep_branch = self.high_classifier.forward(&resize_bilinear(&attended, mh, mw)?)?;
        let mid_branch = self.low_classifier.forward(&pyramid.mid)?;
        if deep_branch.dims() != mid_branch.dims() {
            return Err(Error::Argument(format!(
                "head branches disagree: {:?} vs {:?}",
                deep_branch.dims(),
                mid_branch.dims()
            )));
        }
        let logits = resize_bilinear(&(&deep_branch + &mid_branch)?, height, width)?;
        Ok(HeadParts { attention, deep_features, deep_branch, mid_branch, logits })
    }
}
