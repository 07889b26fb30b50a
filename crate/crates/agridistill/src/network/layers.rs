//! Building blocks: parameter registry, convolutions, normalizations,
//! activations and differentiable bilinear resizing.

use candle_core::{Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;

pub const NORM_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// A named tensor owned by a model. Buffers (running statistics) are
/// serialized with the weights but never handed to the optimizer.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub var: Var,
    pub trainable: bool,
}

/// Creates model tensors with seeded initialization and records them by name.
pub struct ParamRegistry {
    prefix: Vec<String>,
    entries: Vec<ParamEntry>,
    rng: ChaCha8Rng,
    device: Device,
}

impl ParamRegistry {
    pub fn new(seed: u64, device: &Device) -> Self {
        Self {
            prefix: Vec::new(),
            entries: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: device.clone(),
        }
    }

    pub fn push(&mut self, scope: impl Into<String>) {
        self.prefix.push(scope.into());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    fn register(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<Var> {
        let var = Var::from_tensor(&tensor)?;
        self.entries.push(ParamEntry { name: self.full_name(name), var: var.clone(), trainable });
        Ok(var)
    }

    /// Zero-mean normal weights with standard deviation `std`.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values: Vec<f32> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                (z * std) as f32
            })
            .collect();
        let t = Tensor::from_vec(values, shape, &self.device)?;
        self.register(name, t, true)
    }

    /// He-normal initialization for a weight with the given fan-in.
    pub fn kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<Var> {
        self.normal(name, shape, (2.0 / fan_in as f64).sqrt())
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32, trainable: bool) -> Result<Var> {
        let t = Tensor::full(value, shape, &self.device)?;
        self.register(name, t, trainable)
    }

    pub fn finish(self) -> Vec<ParamEntry> {
        self.entries
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    HardSwish,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Relu => x.relu()?,
            Activation::HardSwish => hard_swish(x)?,
        })
    }
}

pub fn hard_sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x + 3.0)?.clamp(0f32, 6f32)? / 6.0)?)
}

pub fn hard_swish(x: &Tensor) -> Result<Tensor> {
    Ok(x.mul(&hard_sigmoid(x)?)?)
}

/// Pointwise convolution implemented as a batched matrix product.
#[derive(Debug, Clone)]
pub struct Conv1x1 {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Conv1x1 {
    pub fn new(reg: &mut ParamRegistry, name: &str, c_in: usize, c_out: usize, bias: bool) -> Result<Self> {
        reg.push(name);
        let weight = reg.kaiming("weight", &[c_out, c_in], c_in)?;
        let bias = if bias { Some(reg.constant("bias", &[c_out], 0.0, true)?) } else { None };
        reg.pop();
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let c_out = self.weight.dim(0)?;
        let flat = x.reshape((b, c, h * w))?;
        let mut y = self.weight.as_tensor().broadcast_matmul(&flat)?;
        if let Some(bias) = &self.bias {
            y = y.broadcast_add(&bias.as_tensor().reshape((1, c_out, 1))?)?;
        }
        Ok(y.reshape((b, c_out, h, w))?)
    }
}

/// Dense 3x3 convolution with "same" padding.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub weight: Var,
    pub stride: usize,
}

impl Conv3x3 {
    pub fn new(reg: &mut ParamRegistry, name: &str, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        reg.push(name);
        let weight = reg.kaiming("weight", &[c_out, c_in, 3, 3], c_in * 9)?;
        reg.pop();
        Ok(Self { weight, stride })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.conv2d(self.weight.as_tensor(), 1, self.stride, 1, 1)?)
    }
}

/// Depthwise `k x k` convolution as a sum of shifted, per-channel scaled views.
#[derive(Debug, Clone)]
pub struct Depthwise {
    pub weight: Var,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl Depthwise {
    pub fn new(
        reg: &mut ParamRegistry,
        name: &str,
        channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
    ) -> Result<Self> {
        reg.push(name);
        let weight = reg.kaiming("weight", &[channels, kernel * kernel], kernel * kernel)?;
        reg.pop();
        Ok(Self { weight, kernel, stride, dilation })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (k, d) = (self.kernel, self.dilation);
        let pad = d * (k - 1) / 2;
        let padded = x.pad_with_zeros(2, pad, pad)?.pad_with_zeros(3, pad, pad)?;
        let mut acc: Option<Tensor> = None;
        for ky in 0..k {
            for kx in 0..k {
                let view = padded.narrow(2, ky * d, h)?.narrow(3, kx * d, w)?;
                let tap = self.weight.as_tensor().narrow(1, ky * k + kx, 1)?.reshape((1, c, 1, 1))?;
                let term = view.broadcast_mul(&tap)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => (a + term)?,
                });
            }
        }
        let out = acc.expect("kernel has at least one tap");
        if self.stride == 1 {
            return Ok(out);
        }
        let s = self.stride;
        Ok(out
            .reshape((b, c, h / s, s, w / s, s))?
            .narrow(3, 0, 1)?
            .narrow(5, 0, 1)?
            .reshape((b, c, h / s, w / s))?)
    }
}

fn reduce_spatial_batch(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_keepdim((0, 2, 3))?)
}

/// Batch normalization with running statistics for evaluation.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub weight: Var,
    pub bias: Var,
    pub running_mean: Var,
    pub running_var: Var,
}

impl BatchNorm {
    pub fn new(reg: &mut ParamRegistry, name: &str, channels: usize) -> Result<Self> {
        reg.push(name);
        let bn = Self {
            weight: reg.constant("weight", &[channels], 1.0, true)?,
            bias: reg.constant("bias", &[channels], 0.0, true)?,
            running_mean: reg.constant("running_mean", &[channels], 0.0, false)?,
            running_var: reg.constant("running_var", &[channels], 1.0, false)?,
        };
        reg.pop();
        Ok(bn)
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let normed = if training {
            let mean = reduce_spatial_batch(x)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = reduce_spatial_batch(&centered.sqr()?)?;
            let n = (b * h * w) as f64;
            let unbiased = if n > 1.0 { (var.detach() * (n / (n - 1.0)))? } else { var.detach() };
            let rm = ((self.running_mean.as_tensor() * (1.0 - BN_MOMENTUM))?
                + (mean.detach().flatten_all()? * BN_MOMENTUM)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - BN_MOMENTUM))?
                + (unbiased.flatten_all()? * BN_MOMENTUM)?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?
        } else {
            let mean = self.running_mean.as_tensor().reshape((1, c, 1, 1))?;
            let std = (self.running_var.as_tensor() + NORM_EPS)?.sqrt()?.reshape((1, c, 1, 1))?;
            x.broadcast_sub(&mean)?.broadcast_div(&std)?
        };
        affine(&normed, &self.weight, &self.bias)
    }
}

fn affine(x: &Tensor, weight: &Var, bias: &Var) -> Result<Tensor> {
    let c = weight.dim(0)?;
    Ok(x
        .broadcast_mul(&weight.as_tensor().reshape((1, c, 1, 1))?)?
        .broadcast_add(&bias.as_tensor().reshape((1, c, 1, 1))?)?)
}

/// Per-instance, per-channel mean and `sqrt(var + eps)` over the spatial dims.
pub fn instance_moments(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let mean = x.mean_keepdim((2, 3))?;
    let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim((2, 3))?;
    Ok((mean, (var + NORM_EPS)?.sqrt()?))
}

/// Instance normalization with a learned affine.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub weight: Var,
    pub bias: Var,
}

impl InstanceNorm {
    pub fn new(reg: &mut ParamRegistry, name: &str, channels: usize) -> Result<Self> {
        reg.push(name);
        let norm = Self {
            weight: reg.constant("weight", &[channels], 1.0, true)?,
            bias: reg.constant("bias", &[channels], 0.0, true)?,
        };
        reg.pop();
        Ok(norm)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (mean, std) = instance_moments(x)?;
        affine(&x.broadcast_sub(&mean)?.broadcast_div(&std)?, &self.weight, &self.bias)
    }
}

/// Normalization slot of a backbone block: plain batch norm, or the
/// instance/batch split where the first half of the channels use instance norm.
#[derive(Debug, Clone)]
pub enum Norm {
    Batch(BatchNorm),
    Ibn { instance: InstanceNorm, batch: BatchNorm, split: usize },
}

impl Norm {
    pub fn new(reg: &mut ParamRegistry, name: &str, channels: usize, ibn: bool) -> Result<Self> {
        if !ibn || channels < 2 {
            return Ok(Norm::Batch(BatchNorm::new(reg, name, channels)?));
        }
        let split = channels / 2;
        reg.push(name);
        let norm = Norm::Ibn {
            instance: InstanceNorm::new(reg, "in", split)?,
            batch: BatchNorm::new(reg, "bn", channels - split)?,
            split,
        };
        reg.pop();
        Ok(norm)
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        match self {
            Norm::Batch(bn) => bn.forward(x, training),
            Norm::Ibn { instance, batch, split } => {
                let c = x.dim(1)?;
                let a = instance.forward(&x.narrow(1, 0, *split)?)?;
                let b = batch.forward(&x.narrow(1, *split, c - split)?, training)?;
                Ok(Tensor::cat(&[a, b], 1)?)
            }
        }
    }

    pub fn is_ibn(&self) -> bool {
        matches!(self, Norm::Ibn { .. })
    }
}

/// Squeeze-and-excite channel attention with a hard-sigmoid gate.
#[derive(Debug, Clone)]
pub struct SqueezeExcite {
    pub reduce: Conv1x1,
    pub expand: Conv1x1,
}

impl SqueezeExcite {
    pub fn new(reg: &mut ParamRegistry, name: &str, channels: usize, squeezed: usize) -> Result<Self> {
        reg.push(name);
        let se = Self {
            reduce: Conv1x1::new(reg, "reduce", channels, squeezed, true)?,
            expand: Conv1x1::new(reg, "expand", squeezed, channels, true)?,
        };
        reg.pop();
        Ok(se)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let pooled = x.mean_keepdim((2, 3))?;
        let gate = hard_sigmoid(&self.expand.forward(&self.reduce.forward(&pooled)?.relu()?)?)?;
        Ok(x.broadcast_mul(&gate)?)
    }
}

/// Row-stochastic `dst x src` matrix of half-pixel bilinear interpolation weights.
pub fn interpolation_matrix(src: usize, dst: usize) -> Vec<f32> {
    let mut m = vec![0f32; dst * src];
    let scale = src as f64 / dst as f64;
    for i in 0..dst {
        let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(src - 1);
        let i1 = (i0 + 1).min(src - 1);
        let f = (s - i0 as f64) as f32;
        m[i * src + i0] += 1.0 - f;
        m[i * src + i1] += f;
    }
    m
}

/// Bilinear resize of a `(B, C, H, W)` tensor, differentiable through two matrix products.
pub fn resize_bilinear(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == height && w == width {
        return Ok(x.clone());
    }
    let dev = x.device();
    let cols = Tensor::from_vec(interpolation_matrix(w, width), (width, w), dev)?.t()?.contiguous()?;
    let rows = Tensor::from_vec(interpolation_matrix(h, height), (height, h), dev)?;
    let along_w = x.broadcast_matmul(&cols)?;
    Ok(rows.broadcast_matmul(&along_w)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dev() -> Device {
        Device::Cpu
    }

    #[test]
    fn depthwise_matches_direct_convolution() {
        let mut reg = ParamRegistry::new(3, &dev());
        for (stride, dilation) in [(1, 1), (2, 1), (1, 2)] {
            let dw = Depthwise::new(&mut reg, "dw", 2, 3, stride, dilation).unwrap();
            let x = Tensor::arange(0f32, 32.0, &dev()).unwrap().reshape((1, 2, 4, 4)).unwrap();
            let got = dw.forward(&x).unwrap();
            let xv: Vec<f32> = x.flatten_all().unwrap().to_vec1().unwrap();
            let wv: Vec<f32> = dw.weight.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            let out = 4 / stride;
            let gv: Vec<f32> = got.flatten_all().unwrap().to_vec1().unwrap();
            let pad = dilation as isize;
            for c in 0..2 {
                for oy in 0..out {
                    for ox in 0..out {
                        let mut acc = 0f32;
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let iy = (oy * stride) as isize + ky * dilation as isize - pad;
                                let ix = (ox * stride) as isize + kx * dilation as isize - pad;
                                if (0..4).contains(&iy) && (0..4).contains(&ix) {
                                    acc += xv[c * 16 + iy as usize * 4 + ix as usize]
                                        * wv[c * 9 + (ky * 3 + kx) as usize];
                                }
                            }
                        }
                        let g = gv[(c * out + oy) * out + ox];
                        assert!((g - acc).abs() < 1e-4, "{g} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn bilinear_matrix_rows_sum_to_one() {
        for (s, d) in [(4, 32), (7, 3), (1, 5)] {
            let m = interpolation_matrix(s, d);
            for row in m.chunks(s) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn bilinear_resize_matches_raster_resize() {
        use agridistill_core::raster::Raster;
        let vals: Vec<f32> = (0..12).map(|v| (v * v) as f32 / 10.0).collect();
        let x = Tensor::from_vec(vals.clone(), (1, 1, 3, 4), &dev()).unwrap();
        let y = resize_bilinear(&x, 8, 6).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let r = Raster::new(4, 3, 1, vals).unwrap().resize_bilinear(6, 8);
        for (a, b) in y.iter().zip(r.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut reg = ParamRegistry::new(0, &dev());
        let bn = BatchNorm::new(&mut reg, "bn", 1).unwrap();
        let x = Tensor::new(&[[[[2f32, 4.0]]]], &dev()).unwrap();
        let eval = bn.forward(&x, false).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!((eval[0] - 2.0).abs() < 1e-3);
        let train = bn.forward(&x, true).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!((train[0] + 1.0).abs() < 1e-3 && (train[1] - 1.0).abs() < 1e-3);
        let rm = bn.running_mean.as_tensor().to_vec1::<f32>().unwrap();
        assert!((rm[0] - 0.3).abs() < 1e-6);
    }
}
