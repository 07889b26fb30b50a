//! Inverted-residual backbones with 1/8 and 1/16 feature taps.

use candle_core::Tensor;

use super::layers::{Activation, Conv1x1, Conv3x3, Depthwise, Norm, ParamRegistry, SqueezeExcite, BatchNorm};
use super::BackboneKind;
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct BlockSpec {
    pub c_in: usize,
    pub kernel: usize,
    pub expanded: usize,
    pub c_out: usize,
    pub squeeze_excite: bool,
    pub activation: Activation,
    pub stride: usize,
    pub dilation: usize,
}

const fn block(
    c_in: usize,
    kernel: usize,
    expanded: usize,
    c_out: usize,
    squeeze_excite: bool,
    hard_swish: bool,
    stride: usize,
    dilation: usize,
) -> BlockSpec {
    BlockSpec {
        c_in,
        kernel,
        expanded,
        c_out,
        squeeze_excite,
        activation: if hard_swish { Activation::HardSwish } else { Activation::Relu },
        stride,
        dilation,
    }
}

/// MobileNetV3-Large with the last stage dilated instead of strided, so the
/// deep features stay at 1/16 of the input.
const STANDARD_BLOCKS: [BlockSpec; 15] = [
    block(16, 3, 16, 16, false, false, 1, 1),
    block(16, 3, 64, 24, false, false, 2, 1),
    block(24, 3, 72, 24, false, false, 1, 1),
    block(24, 5, 72, 40, true, false, 2, 1),
    block(40, 5, 120, 40, true, false, 1, 1),
    block(40, 5, 120, 40, true, false, 1, 1),
    block(40, 3, 240, 80, false, true, 2, 1),
    block(80, 3, 200, 80, false, true, 1, 1),
    block(80, 3, 184, 80, false, true, 1, 1),
    block(80, 3, 184, 80, false, true, 1, 1),
    block(80, 3, 480, 112, true, true, 1, 1),
    block(112, 3, 672, 112, true, true, 1, 1),
    block(112, 5, 672, 160, true, true, 1, 2),
    block(160, 5, 960, 160, true, true, 1, 2),
    block(160, 5, 960, 160, true, true, 1, 2),
];

/// Four stages of widths 16/24/40/96 with the same 1/8 and 1/16 taps.
const TOY_BLOCKS: [BlockSpec; 4] = [
    block(16, 3, 16, 16, false, false, 1, 1),
    block(16, 3, 64, 24, false, false, 2, 1),
    block(24, 3, 96, 40, true, false, 2, 1),
    block(40, 3, 160, 96, true, true, 2, 1),
];

/// Static layout of a backbone variant.
#[derive(Debug, Clone, Copy)]
pub struct BackboneLayout {
    pub blocks: &'static [BlockSpec],
    /// Index of the block whose output is the 1/8 tap.
    pub mid_tap: usize,
    /// Width of the optional final pointwise expansion producing the deep features.
    pub final_width: Option<usize>,
    pub head_width: usize,
}

impl BackboneLayout {
    pub fn of(kind: BackboneKind) -> Self {
        match kind {
            BackboneKind::Standard => Self {
                blocks: &STANDARD_BLOCKS,
                mid_tap: 5,
                final_width: Some(960),
                head_width: 128,
            },
            BackboneKind::Toy => Self { blocks: &TOY_BLOCKS, mid_tap: 2, final_width: None, head_width: 32 },
        }
    }

    pub fn mid_channels(&self) -> usize {
        self.blocks[self.mid_tap].c_out
    }

    pub fn deep_channels(&self) -> usize {
        self.final_width.unwrap_or(self.blocks[self.blocks.len() - 1].c_out)
    }
}

fn make_divisible(v: usize, divisor: usize) -> usize {
    let rounded = ((v + divisor / 2) / divisor * divisor).max(divisor);
    if (rounded as f64) < 0.9 * v as f64 {
        rounded + divisor
    } else {
        rounded
    }
}

#[derive(Debug, Clone)]
pub struct InvertedResidual {
    pub spec: BlockSpec,
    expand: Option<(Conv1x1, Norm)>,
    depthwise: Depthwise,
    depthwise_norm: Norm,
    squeeze_excite: Option<SqueezeExcite>,
    project: Conv1x1,
    project_norm: BatchNorm,
}

impl InvertedResidual {
    fn new(reg: &mut ParamRegistry, index: usize, spec: BlockSpec, ibn: bool) -> Result<Self> {
        reg.push(format!("block{index}"));
        let expand = if spec.expanded != spec.c_in {
            let conv = Conv1x1::new(reg, "expand", spec.c_in, spec.expanded, false)?;
            Some((conv, Norm::new(reg, "expand_norm", spec.expanded, ibn)?))
        } else {
            None
        };
        let depthwise = Depthwise::new(reg, "depthwise", spec.expanded, spec.kernel, spec.stride, spec.dilation)?;
        // the first normalization of the block carries the instance/batch split
        let depthwise_norm = Norm::new(reg, "depthwise_norm", spec.expanded, ibn && expand.is_none())?;
        let squeeze_excite = if spec.squeeze_excite {
            let squeezed = make_divisible(spec.expanded / 4, 8);
            Some(SqueezeExcite::new(reg, "se", spec.expanded, squeezed)?)
        } else {
            None
        };
        let project = Conv1x1::new(reg, "project", spec.expanded, spec.c_out, false)?;
        let project_norm = BatchNorm::new(reg, "project_norm", spec.c_out)?;
        reg.pop();
        Ok(Self { spec, expand, depthwise, depthwise_norm, squeeze_excite, project, project_norm })
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let act = self.spec.activation;
        let mut h = x.clone();
        if let Some((conv, norm)) = &self.expand {
            h = act.apply(&norm.forward(&conv.forward(&h)?, training)?)?;
        }
        h = act.apply(&self.depthwise_norm.forward(&self.depthwise.forward(&h)?, training)?)?;
        if let Some(se) = &self.squeeze_excite {
            h = se.forward(&h)?;
        }
        h = self.project_norm.forward(&self.project.forward(&h)?, training)?;
        if self.spec.stride == 1 && self.spec.c_in == self.spec.c_out {
            h = (h + x)?;
        }
        Ok(h)
    }

    pub fn uses_ibn(&self) -> bool {
        self.expand.as_ref().is_some_and(|(_, n)| n.is_ibn()) || self.depthwise_norm.is_ibn()
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub layout: BackboneLayout,
    stem: Conv3x3,
    stem_norm: BatchNorm,
    pub blocks: Vec<InvertedResidual>,
    final_conv: Option<(Conv1x1, BatchNorm)>,
}

impl Backbone {
    pub fn new(reg: &mut ParamRegistry, kind: BackboneKind, ibn_blocks: &[usize]) -> Result<Self> {
        let layout = BackboneLayout::of(kind);
        reg.push("backbone");
        let stem = Conv3x3::new(reg, "stem", 3, layout.blocks[0].c_in, 2)?;
        let stem_norm = BatchNorm::new(reg, "stem_norm", layout.blocks[0].c_in)?;
        let blocks = layout
            .blocks
            .iter()
            .enumerate()
            .map(|(i, spec)| InvertedResidual::new(reg, i, *spec, ibn_blocks.contains(&i)))
            .collect::<Result<Vec<_>>>()?;
        let final_conv = match layout.final_width {
            Some(width) => {
                let c_in = layout.blocks[layout.blocks.len() - 1].c_out;
                Some((Conv1x1::new(reg, "final", c_in, width, false)?, BatchNorm::new(reg, "final_norm", width)?))
            }
            None => None,
        };
        reg.pop();
        Ok(Self { layout, stem, stem_norm, blocks, final_conv })
    }

    pub fn stem(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        Activation::HardSwish.apply(&self.stem_norm.forward(&self.stem.forward(x)?, training)?)
    }

    pub fn finish(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        match &self.final_conv {
            Some((conv, norm)) => Activation::HardSwish.apply(&norm.forward(&conv.forward(x)?, training)?),
            None => Ok(x.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layouts_reduce_to_one_eighth_and_one_sixteenth() {
        for kind in [BackboneKind::Standard, BackboneKind::Toy] {
            let layout = BackboneLayout::of(kind);
            let stride_to = |upto: usize| -> usize {
                2 * layout.blocks[..=upto].iter().map(|b| b.stride).product::<usize>()
            };
            assert_eq!(stride_to(layout.mid_tap), 8);
            assert_eq!(stride_to(layout.blocks.len() - 1), 16);
            for pair in layout.blocks.windows(2) {
                assert_eq!(pair[0].c_out, pair[1].c_in);
            }
        }
    }

    #[test]
    fn toy_widths() {
        let widths: Vec<usize> = BackboneLayout::of(BackboneKind::Toy).blocks.iter().map(|b| b.c_out).collect();
        assert_eq!(widths, vec![16, 24, 40, 96]);
    }

    #[test]
    fn divisible_rounding() {
        assert_eq!(make_divisible(72 / 4, 8), 24);
        assert_eq!(make_divisible(960 / 4, 8), 240);
        assert_eq!(make_divisible(3, 8), 8);
    }
}
