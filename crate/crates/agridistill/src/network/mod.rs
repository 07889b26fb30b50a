//! Segmentation network: inverted-residual backbone, LR-ASPP head and the
//! optional normalization variants at backbone block outputs.
//!
//! Tensors are NCHW: images enter as `(B, 3, H, W)` and logits leave as
//! `(B, C, H, W)`.

pub mod backbone;
pub mod head;
pub mod layers;
pub mod style;

use std::collections::HashMap;
use std::path::PathBuf;

use candle_core::{Device, Tensor, Var};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use self::backbone::{Backbone, BackboneLayout};
use self::head::{HeadParts, LrAspp};
use self::layers::{ParamEntry, ParamRegistry};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Standard,
    Toy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormVariant {
    #[default]
    None,
    Ibn,
    Unistyle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub pretrained: bool,
    /// Safetensors file with image-classification weights for the standard backbone.
    pub pretrained_weights: Option<PathBuf>,
    /// `(width, height)`; both must be multiples of 16.
    pub input_size: (usize, usize),
    pub num_classes: usize,
    pub norm_variant: NormVariant,
    /// Backbone blocks carrying the normalization variant.
    pub norm_blocks: Vec<usize>,
    pub padain_prob: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Standard,
            pretrained: true,
            pretrained_weights: None,
            input_size: (224, 224),
            num_classes: 1,
            norm_variant: NormVariant::None,
            norm_blocks: Vec::new(),
            padain_prob: 0.0,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration on the toy backbone.
    pub fn toy(side: usize) -> Self {
        Self { backbone: BackboneKind::Toy, pretrained: false, input_size: (side, side), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.input_size;
        if w == 0 || h == 0 || w % 16 != 0 || h % 16 != 0 {
            return Err(Error::Config(format!("input size {w}x{h} must be positive multiples of 16")));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        let blocks = BackboneLayout::of(self.backbone).blocks.len();
        if let Some(b) = self.norm_blocks.iter().find(|&&b| b >= blocks) {
            return Err(Error::Config(format!("block {b} out of range for a {blocks}-block backbone")));
        }
        if !(0.0..=1.0).contains(&self.padain_prob) {
            return Err(Error::Config(format!("padain_prob must lie in [0, 1], got {}", self.padain_prob)));
        }
        if self.pretrained {
            match (self.backbone, &self.pretrained_weights) {
                (BackboneKind::Toy, _) => {
                    return Err(Error::Config("no pretrained weights exist for the toy backbone".into()))
                }
                (BackboneKind::Standard, None) => {
                    return Err(Error::Config(
                        "pretrained=true needs `pretrained_weights` pointing at a safetensors file".into(),
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Backbone taps consumed by the head.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    /// 1/8 spatial reduction.
    pub mid: Tensor,
    /// 1/16 spatial reduction.
    pub deep: Tensor,
}

/// Execution mode of a forward pass. Training mode uses batch statistics and
/// draws the stochastic feature-statistics swaps from the given generator.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Which hooks fired during one forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardTrace {
    pub whitened_blocks: Vec<usize>,
    pub ibn_blocks: Vec<usize>,
    /// `(block, permutation)` for every statistics swap that happened.
    pub padain_swaps: Vec<(usize, Vec<usize>)>,
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    backbone: Backbone,
    head: LrAspp,
    params: Vec<ParamEntry>,
    device: Device,
}

impl Model {
    /// Builds a freshly initialized model; weights are a pure function of `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut reg = ParamRegistry::new(seed, device);
        let ibn_blocks: &[usize] = if cfg.norm_variant == NormVariant::Ibn { &cfg.norm_blocks } else { &[] };
        let backbone = Backbone::new(&mut reg, cfg.backbone, ibn_blocks)?;
        let layout = backbone.layout;
        let head = LrAspp::new(&mut reg, layout.mid_channels(), layout.deep_channels(), layout.head_width, cfg.num_classes)?;
        let model = Self { cfg: cfg.clone(), backbone, head, params: reg.finish(), device: device.clone() };
        if cfg.pretrained {
            let path = cfg.pretrained_weights.as_ref().expect("validated above");
            let tensors = candle_core::safetensors::load(path, device)
                .map_err(|e| Error::Config(format!("loading pretrained weights {}: {e}", path.display())))?;
            let backbone_only: HashMap<String, Tensor> =
                tensors.into_iter().filter(|(k, _)| k.starts_with("backbone.")).collect();
            model.load_tensors(&backbone_only, false)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn layout(&self) -> BackboneLayout {
        self.backbone.layout
    }

    pub fn params(&self) -> &[ParamEntry] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Var> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.var)
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.params.iter().filter(|p| p.trainable).map(|p| p.var.clone()).collect()
    }

    /// Copies of every tensor (weights and running statistics) keyed by name.
    pub fn snapshot(&self) -> Result<Vec<(String, Tensor)>> {
        self.params.iter().map(|p| Ok((p.name.clone(), p.var.as_tensor().copy()?))).collect()
    }

    pub fn restore(&self, snapshot: &[(String, Tensor)]) -> Result<()> {
        let map: HashMap<String, Tensor> = snapshot.iter().cloned().collect();
        self.load_tensors(&map, true)
    }

    /// Overwrites parameters from `tensors`; with `strict` every parameter must be present.
    pub fn load_tensors(&self, tensors: &HashMap<String, Tensor>, strict: bool) -> Result<()> {
        for p in &self.params {
            match tensors.get(&p.name) {
                Some(t) => {
                    if t.dims() != p.var.dims() {
                        return Err(Error::Checkpoint(format!(
                            "{}: stored shape {:?}, model expects {:?}",
                            p.name,
                            t.dims(),
                            p.var.dims()
                        )));
                    }
                    p.var.set(&t.to_dtype(p.var.dtype())?.to_device(&self.device)?)?;
                }
                None if strict => return Err(Error::Checkpoint(format!("missing tensor {}", p.name))),
                None => {}
            }
        }
        Ok(())
    }

    /// Structurally identical model sharing no storage with `self`.
    pub fn deep_copy(&self) -> Result<Self> {
        let copy = Self::new(&ModelConfig { pretrained: false, ..self.cfg.clone() }, 0, &self.device)?;
        copy.restore(&self.snapshot()?)?;
        Ok(Self { cfg: self.cfg.clone(), ..copy })
    }

    /// Order-sensitive FNV-1a digest over every parameter's bytes.
    pub fn checksum(&self) -> Result<u64> {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for v in p.var.as_tensor().flatten_all()?.to_vec1::<f32>()? {
                for b in v.to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x100_0000_01b3);
                }
            }
        }
        Ok(h)
    }

    pub fn features(&self, images: &Tensor, mode: &mut Mode<'_>) -> Result<FeaturePyramid> {
        Ok(self.features_traced(images, mode)?.0)
    }

    fn features_traced(&self, images: &Tensor, mode: &mut Mode<'_>) -> Result<(FeaturePyramid, ForwardTrace)> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || (w, h) != self.cfg.input_size {
            return Err(Error::Argument(format!(
                "expected (B, 3, {}, {}) images, got {:?}",
                self.cfg.input_size.1,
                self.cfg.input_size.0,
                images.dims()
            )));
        }
        let training = mode.is_training();
        let mut trace = ForwardTrace::default();
        let mut x = self.backbone.stem(images, training)?;
        let mut mid = None;
        for (i, block) in self.backbone.blocks.iter().enumerate() {
            x = block.forward(&x, training)?;
            if block.uses_ibn() {
                trace.ibn_blocks.push(i);
            }
            if self.cfg.norm_variant == NormVariant::Unistyle && self.cfg.norm_blocks.contains(&i) {
                x = style::unistyle_whiten(&x)?;
                trace.whitened_blocks.push(i);
            }
            if self.cfg.padain_prob > 0.0 {
                if let Mode::Train(rng) = mode {
                    let (swapped, perm) = style::padain_swap(&x, self.cfg.padain_prob, Some(&mut **rng))?;
                    x = swapped;
                    if let Some(perm) = perm {
                        trace.padain_swaps.push((i, perm));
                    }
                }
            }
            if i == self.backbone.layout.mid_tap {
                mid = Some(x.clone());
            }
        }
        let deep = self.backbone.finish(&x, training)?;
        let mid = mid.expect("mid tap lies inside the block list");
        Ok((FeaturePyramid { mid, deep }, trace))
    }

    /// Logits `(B, C, H, W)` at the input resolution.
    pub fn forward(&self, images: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        Ok(self.forward_traced(images, mode)?.0)
    }

    pub fn forward_traced(&self, images: &Tensor, mode: &mut Mode<'_>) -> Result<(Tensor, ForwardTrace)> {
        let (pyramid, trace) = self.features_traced(images, mode)?;
        let (w, h) = self.cfg.input_size;
        Ok((self.head.forward(&pyramid, (h, w), mode.is_training())?, trace))
    }

    /// Head evaluation with its intermediate values exposed.
    pub fn head_parts(
        &self,
        pyramid: &FeaturePyramid,
        training: bool,
        attention_override: Option<&Tensor>,
    ) -> Result<HeadParts> {
        let (w, h) = self.cfg.input_size;
        self.head.forward_parts(pyramid, (h, w), training, attention_override)
    }
}
