//! Training-time augmentation and evaluation-time preprocessing.
//!
//! The pipeline runs crop, horizontal flip, greyscale, brightness/contrast,
//! resize and normalization in that order. Masks only ever see the
//! geometric steps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::raster::{Mask, Raster, Sample};

/// Per-channel standardization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    pub const IMAGENET: Self = Self { mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225] };
}

impl Default for Normalization {
    fn default() -> Self {
        Self::IMAGENET
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub crop_factor_range: (f64, f64),
    pub flip_prob: f64,
    pub greyscale_prob: f64,
    pub brightness_contrast_max_delta: f64,
    pub output_size: (usize, usize),
    pub normalization: Normalization,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_factor_range: (0.5, 1.0),
            flip_prob: 0.5,
            greyscale_prob: 0.1,
            brightness_contrast_max_delta: 0.4,
            output_size: (224, 224),
            normalization: Normalization::IMAGENET,
        }
    }
}

impl AugmentConfig {
    /// Configuration with every stochastic step disabled.
    pub fn identity(output_size: (usize, usize)) -> Self {
        Self {
            crop_factor_range: (1.0, 1.0),
            flip_prob: 0.0,
            greyscale_prob: 0.0,
            brightness_contrast_max_delta: 0.0,
            output_size,
            normalization: Normalization::IMAGENET,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_factor_range(self.crop_factor_range)?;
        for (name, p) in [("flip_prob", self.flip_prob), ("greyscale_prob", self.greyscale_prob)] {
            if !(0.0..=1.0).contains(&p) {
                bail!(Config, "{name} must lie in [0, 1], got {p}");
            }
        }
        let d = self.brightness_contrast_max_delta;
        if !(0.0..1.0).contains(&d) {
            bail!(Config, "brightness/contrast delta must lie in [0, 1), got {d}");
        }
        if self.output_size.0 == 0 || self.output_size.1 == 0 {
            bail!(Config, "output size must be positive, got {:?}", self.output_size);
        }
        if self.normalization.std.iter().any(|&s| s <= 0.0) {
            bail!(Config, "normalization std must be positive");
        }
        Ok(())
    }
}

fn check_factor_range((low, high): (f64, f64)) -> Result<()> {
    if !(low > 0.0 && low <= high && high <= 1.0) {
        bail!(Argument, "crop factor range must satisfy 0 < low <= high <= 1, got ({low}, {high})");
    }
    Ok(())
}

/// A network-ready image (standardized, not restricted to `[0, 1]`) and its mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub image: Raster,
    pub mask: Mask,
}

fn check_rgb(image: &Raster) -> Result<()> {
    if image.channels() != 3 {
        bail!(Shape, "expected a 3-channel image, got {} channels", image.channels());
    }
    Ok(())
}

/// `(value - mean_c) / std_c` per channel.
pub fn normalize(image: &Raster, stats: &Normalization) -> Result<Raster> {
    check_rgb(image)?;
    let mut out = image.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = (px[c] - stats.mean[c]) / stats.std[c];
        }
    }
    Ok(out)
}

/// Inverse of [`normalize`].
pub fn denormalize(image: &Raster, stats: &Normalization) -> Result<Raster> {
    check_rgb(image)?;
    let mut out = image.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = px[c] * stats.std[c] + stats.mean[c];
        }
    }
    Ok(out)
}

/// Where a square crop was taken.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropDraw {
    pub factor: f64,
    pub x0: usize,
    pub y0: usize,
    pub side: usize,
}

fn draw_crop<R: Rng + ?Sized>(
    width: usize,
    height: usize,
    factor_range: (f64, f64),
    rng: &mut R,
) -> Result<CropDraw> {
    check_factor_range(factor_range)?;
    let factor = rng.random_range(factor_range.0..=factor_range.1);
    let side = libm::round(factor * width.min(height) as f64) as usize;
    if side < 1 {
        bail!(Argument, "crop factor {factor} on a {width}x{height} image is below one pixel");
    }
    let x0 = rng.random_range(0..=width - side);
    let y0 = rng.random_range(0..=height - side);
    Ok(CropDraw { factor, x0, y0, side })
}

fn crop_sample(sample: &Sample, d: &CropDraw) -> Sample {
    Sample {
        image: sample.image.crop(d.x0, d.y0, d.side, d.side),
        mask: sample.mask.crop(d.x0, d.y0, d.side, d.side),
        domain: sample.domain.clone(),
    }
}

fn resize_sample(sample: &Sample, (w, h): (usize, usize)) -> Sample {
    Sample {
        image: sample.image.resize_bilinear(w, h),
        mask: sample.mask.resize_nearest(w, h),
        domain: sample.domain.clone(),
    }
}

/// Square crop of side `round(factor * min(width, height))`, resized to `output_size`.
pub fn random_crop<R: Rng + ?Sized>(
    sample: &Sample,
    factor_range: (f64, f64),
    output_size: (usize, usize),
    rng: &mut R,
) -> Result<(Sample, CropDraw)> {
    let draw = draw_crop(sample.image.width(), sample.image.height(), factor_range, rng)?;
    Ok((resize_sample(&crop_sample(sample, &draw), output_size), draw))
}

pub fn flip_horizontal(sample: &Sample) -> Sample {
    Sample {
        image: sample.image.flip_horizontal(),
        mask: sample.mask.flip_horizontal(),
        domain: sample.domain.clone(),
    }
}

/// Luma projection (`0.299 R + 0.587 G + 0.114 B`) copied into all three channels.
pub fn to_greyscale(image: &Raster) -> Result<Raster> {
    check_rgb(image)?;
    let mut out = image.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        let y = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        px.fill(y);
    }
    Ok(out)
}

/// Adds `brightness`, then scales each channel about its mean by `contrast`; clips to `[0, 1]`.
pub fn adjust_brightness_contrast(image: &Raster, brightness: f32, contrast: f32) -> Result<Raster> {
    check_rgb(image)?;
    let mut out = image.clone();
    let n = (image.width() * image.height()) as f32;
    let mut means = [0.0f32; 3];
    for px in out.data_mut().chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] += brightness;
            means[c] += px[c] / n;
        }
    }
    for px in out.data_mut().chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = ((px[c] - means[c]) * contrast + means[c]).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// The random decisions taken by one pipeline invocation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentTrace {
    pub crop: CropDraw,
    pub flipped: bool,
    pub greyscale: bool,
    pub brightness: f32,
    pub contrast: f32,
}

/// Runs the full training augmentation. Every invocation consumes the same
/// number of draws from `rng`, whatever the probabilities are.
pub fn augment_pipeline<R: Rng + ?Sized>(
    sample: &Sample,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(PreparedSample, AugmentTrace)> {
    cfg.validate()?;
    check_rgb(&sample.image)?;
    let crop = draw_crop(sample.image.width(), sample.image.height(), cfg.crop_factor_range, rng)?;
    let flipped = rng.random_bool(cfg.flip_prob);
    let greyscale = rng.random_bool(cfg.greyscale_prob);
    let delta = cfg.brightness_contrast_max_delta as f32;
    let brightness = rng.random_range(-1.0f32..=1.0) * delta;
    let contrast = 1.0 + rng.random_range(-1.0f32..=1.0) * delta;

    let mut current = crop_sample(sample, &crop);
    if flipped {
        current = flip_horizontal(&current);
    }
    let mut image = current.image;
    if greyscale {
        image = to_greyscale(&image)?;
    }
    if delta > 0.0 {
        image = adjust_brightness_contrast(&image, brightness, contrast)?;
    }
    let (w, h) = cfg.output_size;
    let image = normalize(&image.resize_bilinear(w, h), &cfg.normalization)?;
    let mask = current.mask.resize_nearest(w, h);
    Ok((PreparedSample { image, mask }, AugmentTrace { crop, flipped, greyscale, brightness, contrast }))
}

/// Deterministic evaluation preprocessing: resize and normalize.
pub fn preprocess_eval(sample: &Sample, cfg: &AugmentConfig) -> Result<PreparedSample> {
    let (w, h) = cfg.output_size;
    let resized = resize_sample(sample, (w, h));
    Ok(PreparedSample { image: normalize(&resized.image, &cfg.normalization)?, mask: resized.mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;
    use rand::rngs::SmallRng;
    use rand::SeedableRng;

    fn gradient_sample(w: usize, h: usize) -> Sample {
        let mut data = Vec::with_capacity(w * h * 3);
        let mut mask = Mask::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                data.extend([x as f32 / w as f32, y as f32 / h as f32, 0.5]);
                mask.set(x, y, x < w / 3);
            }
        }
        Sample::new(Raster::new(w, h, 3, data).unwrap(), mask, "d").unwrap()
    }

    #[test]
    fn mean_pixel_normalizes_to_zero() {
        let stats = Normalization::IMAGENET;
        let img = Raster::new(1, 1, 3, stats.mean.to_vec()).unwrap();
        assert!(normalize(&img, &stats).unwrap().data().iter().all(|v| v.abs() < 1e-7));
    }

    #[test]
    fn constant_white_normalizes_per_channel() {
        let stats = Normalization::IMAGENET;
        let out = normalize(&Raster::filled(2, 2, 3, 1.0), &stats).unwrap();
        let expected = [(1.0 - 0.485) / 0.229, (1.0 - 0.456) / 0.224, (1.0 - 0.406) / 0.225];
        for px in out.data().chunks_exact(3) {
            for c in 0..3 {
                assert!((px[c] as f64 - expected[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn normalize_rejects_wrong_channel_count() {
        let img = Raster::filled(2, 2, 1, 0.0);
        assert!(matches!(normalize(&img, &Normalization::IMAGENET), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn normalize_round_trips() {
        let s = gradient_sample(6, 4);
        let stats = Normalization::IMAGENET;
        let back = denormalize(&normalize(&s.image, &stats).unwrap(), &stats).unwrap();
        for (a, b) in back.data().iter().zip(s.image.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn unit_range_crop_is_a_plain_resize() {
        let s = gradient_sample(8, 8);
        let mut rng = SmallRng::seed_from_u64(1);
        let (out, draw) = random_crop(&s, (1.0, 1.0), (16, 16), &mut rng).unwrap();
        assert_eq!((draw.side, draw.x0, draw.y0), (8, 0, 0));
        assert_eq!(out.image, s.image.resize_bilinear(16, 16));
        assert_eq!(out.mask, s.mask.resize_nearest(16, 16));
    }

    #[test]
    fn crops_are_reproducible_and_in_range() {
        let s = gradient_sample(32, 24);
        let a = random_crop(&s, (0.5, 1.0), (16, 16), &mut SmallRng::seed_from_u64(5)).unwrap();
        let b = random_crop(&s, (0.5, 1.0), (16, 16), &mut SmallRng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        let mut rng = SmallRng::seed_from_u64(9);
        for _ in 0..100 {
            let (_, d) = random_crop(&s, (0.5, 1.0), (8, 8), &mut rng).unwrap();
            assert!((0.5..=1.0).contains(&d.factor));
            assert!(d.x0 + d.side <= 32 && d.y0 + d.side <= 24);
        }
    }

    #[test]
    fn sub_pixel_crop_is_rejected() {
        let s = gradient_sample(2, 2);
        let err = random_crop(&s, (0.1, 0.1), (2, 2), &mut SmallRng::seed_from_u64(0));
        assert!(matches!(err, Err(crate::Error::Argument(_))));
    }

    #[test]
    fn double_flip_is_identity() {
        let s = gradient_sample(7, 3);
        assert_eq!(flip_horizontal(&flip_horizontal(&s)), s);
    }

    #[test]
    fn identity_config_only_resizes_and_normalizes() {
        let s = gradient_sample(8, 8);
        let cfg = AugmentConfig::identity((16, 16));
        let (out, trace) = augment_pipeline(&s, &cfg, &mut SmallRng::seed_from_u64(2)).unwrap();
        assert!(!trace.flipped && !trace.greyscale);
        assert_eq!(out, preprocess_eval(&s, &cfg).unwrap());
        assert_eq!(out.mask, s.mask.resize_nearest(16, 16));
    }

    #[test]
    fn greyscale_keeps_three_equal_channels() {
        let g = to_greyscale(&gradient_sample(4, 4).image).unwrap();
        assert_eq!(g.channels(), 3);
        assert!(g.data().chunks_exact(3).all(|p| p[0] == p[1] && p[1] == p[2]));
    }
}
