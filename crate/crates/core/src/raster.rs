//! Interleaved image rasters and binary masks.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};

/// Row-major interleaved raster (`(y * width + x) * channels + c`).
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            bail!(Shape, "raster dims must be positive, got {width}x{height}x{channels}");
        }
        if data.len() != width * height * channels {
            bail!(
                Shape,
                "raster {width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                data.len()
            );
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self { width, height, channels, data: vec![value; width * height * channels] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Channel-major copy (`c, y, x`), the layout the network consumes.
    pub fn to_planar(&self) -> Vec<f32> {
        let n = self.width * self.height;
        let mut out = vec![0.0; n * self.channels];
        for (i, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * n + i] = v;
            }
        }
        out
    }

    /// Sub-rectangle copy; the caller guarantees it lies inside the raster.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        let mut data = Vec::with_capacity(w * h * self.channels);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * self.channels;
            data.extend_from_slice(&self.data[start..start + w * self.channels]);
        }
        Self { width: w, height: h, channels: self.channels, data }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.pixel_mut(x, y).copy_from_slice(self.pixel(self.width - 1 - x, y));
            }
        }
        out
    }

    /// Bilinear resampling with half-pixel centers and edge clamping.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let xs = sample_axis(self.width, width);
        let ys = sample_axis(self.height, height);
        let mut data = Vec::with_capacity(width * height * self.channels);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                for c in 0..self.channels {
                    let p00 = self.pixel(x0, y0)[c];
                    let p01 = self.pixel(x1, y0)[c];
                    let p10 = self.pixel(x0, y1)[c];
                    let p11 = self.pixel(x1, y1)[c];
                    let top = p00 + (p01 - p00) * fx;
                    let bottom = p10 + (p11 - p10) * fx;
                    data.push(top + (bottom - top) * fy);
                }
            }
        }
        Self { width, height, channels: self.channels, data }
    }
}

fn sample_axis(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (libm::floor(s) as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

/// Single-channel binary mask, values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            bail!(Shape, "mask dims must be positive, got {width}x{height}");
        }
        if data.len() != width * height {
            bail!(Shape, "mask {width}x{height} needs {} values, got {}", width * height, data.len());
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            bail!(Argument, "mask is not binary: value {} at index {i}", data[i]);
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.data.iter().map(|&v| usize::from(v)).sum::<usize>() as f64 / self.data.len() as f64
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            let start = y * self.width + x0;
            data.extend_from_slice(&self.data[start..start + w]);
        }
        Self { width: w, height: h, data }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_exact_mut(self.width) {
            row.reverse();
        }
        Self { data, ..*self }
    }

    /// Nearest-neighbour resampling; the result stays binary.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let pick = |dst: usize, src: usize, i: usize| -> usize {
            let s = libm::floor((i as f64 + 0.5) * src as f64 / dst as f64) as usize;
            s.min(src - 1)
        };
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            let sy = pick(height, self.height, y);
            for x in 0..width {
                data.push(self.data[sy * self.width + pick(width, self.width, x)]);
            }
        }
        Self { width, height, data }
    }
}

/// One labelled example: an RGB raster with values in `[0, 1]` and its mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Raster,
    pub mask: Mask,
    pub domain: String,
}

impl Sample {
    pub fn new(image: Raster, mask: Mask, domain: impl Into<String>) -> Result<Self> {
        if image.channels() != 3 {
            bail!(Shape, "sample image must have 3 channels, got {}", image.channels());
        }
        if image.width() != mask.width() || image.height() != mask.height() {
            bail!(
                Shape,
                "image {}x{} and mask {}x{} differ",
                image.width(),
                image.height(),
                mask.width(),
                mask.height()
            );
        }
        Ok(Self { image, mask, domain: domain.into() })
    }
}
