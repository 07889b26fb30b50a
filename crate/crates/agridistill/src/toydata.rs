//! Procedural multi-domain segmentation data.
//!
//! Every sample is a few foreground shapes over a textured background with
//! optional clutter shapes that are not labeled. Domains differ only in
//! palettes, texture noise and clutter, so they share the segmentation task.
//! The shapes of every sample are stored next to the data so masks can be
//! recomputed.

use std::fs;
use std::path::{Path, PathBuf};

use agridistill_core::domain::{Category, DomainDescriptor, SourceType};
use agridistill_core::raster::{Mask, Raster};
use agridistill_core::split::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{self, format_meta, DatasetManifest, IMAGES_DIR, MASKS_DIR, META_FILE};
use crate::error::{Error, Result};

/// File holding the generation parameters of a domain.
pub const GENERATION_FILE: &str = "generation.json";

const MAX_ATTEMPTS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Blob,
    RowOfBlobs,
    TallColumn,
    /// One large centered ellipse, for fitting checks.
    Disc,
}

/// Axis-aligned box in RGB space; colors are drawn uniformly inside it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub low: [f32; 3],
    pub high: [f32; 3],
}

impl Palette {
    pub const fn new(low: [f32; 3], high: [f32; 3]) -> Self {
        Self { low, high }
    }

    fn draw(&self, rng: &mut impl Rng) -> [f32; 3] {
        std::array::from_fn(|c| self.low[c] + (self.high[c] - self.low[c]) * rng.random::<f32>())
    }

    fn validate(&self, what: &str) -> Result<()> {
        let ok = (0..3).all(|c| 0.0 <= self.low[c] && self.low[c] <= self.high[c] && self.high[c] <= 1.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("{what} palette must satisfy 0 <= low <= high <= 1")))
        }
    }
}

/// Unlabeled background shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Clutter {
    pub palette: Palette,
    /// Inclusive range of clutter shapes per image.
    pub count: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyDomainSpec {
    pub name: String,
    pub shape_family: ShapeFamily,
    pub foreground_palette: Palette,
    pub background_palette: Palette,
    /// Amplitude of per-pixel uniform noise.
    pub texture_noise: f32,
    pub samples: usize,
    pub image_size: (usize, usize),
    #[serde(default)]
    pub clutter: Option<Clutter>,
    #[serde(default = "default_band")]
    pub foreground_band: (f64, f64),
    #[serde(default = "default_source_type")]
    pub source_type: SourceType,
    #[serde(default = "default_category")]
    pub category: Category,
    #[serde(default)]
    pub height_m: Option<f64>,
}

fn default_band() -> (f64, f64) {
    (0.05, 0.6)
}

fn default_source_type() -> SourceType {
    SourceType::Synthetic
}

fn default_category() -> Category {
    Category::Any
}

impl ToyDomainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("toy domain '{}': {m}", self.name)));
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return bad("name must be a plain directory name".into());
        }
        let (w, h) = self.image_size;
        if w < 8 || h < 8 {
            return bad(format!("image size {w}x{h} is below 8x8"));
        }
        if self.samples == 0 {
            return bad("samples must be positive".into());
        }
        let (lo, hi) = self.foreground_band;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return bad(format!("foreground band ({lo}, {hi}) must satisfy 0 <= low < high <= 1"));
        }
        if !(0.0..=1.0).contains(&self.texture_noise) {
            return bad("texture_noise must lie in [0, 1]".into());
        }
        self.foreground_palette.validate("foreground")?;
        self.background_palette.validate("background")?;
        if let Some(c) = &self.clutter {
            c.palette.validate("clutter")?;
            if c.count.0 > c.count.1 {
                return bad("clutter count range is reversed".into());
            }
        }
        Ok(())
    }

    pub fn descriptor(&self) -> DomainDescriptor {
        DomainDescriptor {
            name: self.name.clone(),
            sample_count: self.samples,
            source_type: self.source_type,
            category: self.category,
            height_m: self.height_m,
        }
    }
}

/// Geometry in pixel units; a pixel belongs to a shape when its center does.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Shape {
    pub fn contains(&self, px: f64, py: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => {
                let (dx, dy) = ((px - cx) / rx, (py - cy) / ry);
                dx * dx + dy * dy <= 1.0
            }
            Shape::Rect { x0, y0, x1, y1 } => px >= x0 && px < x1 && py >= y0 && py < y1,
        }
    }
}

/// Rasterizes the union of `shapes`.
pub fn render_mask(shapes: &[Shape], width: usize, height: usize) -> Mask {
    let mut mask = Mask::zeros(width, height);
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            mask.set(x, y, shapes.iter().any(|s| s.contains(px, py)));
        }
    }
    mask
}

/// Generation record of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub stem: String,
    pub foreground: Vec<Shape>,
    pub clutter: Vec<Shape>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub seed: u64,
    pub spec: ToyDomainSpec,
    pub samples: Vec<SampleRecord>,
}

fn draw_foreground(family: ShapeFamily, w: f64, h: f64, rng: &mut impl Rng) -> Vec<Shape> {
    let side = w.min(h);
    match family {
        ShapeFamily::Blob => {
            let n = rng.random_range(1..=3);
            (0..n)
                .map(|_| Shape::Ellipse {
                    cx: rng.random_range(0.2 * w..0.8 * w),
                    cy: rng.random_range(0.2 * h..0.8 * h),
                    rx: rng.random_range(0.12..0.28) * side,
                    ry: rng.random_range(0.12..0.28) * side,
                })
                .collect()
        }
        ShapeFamily::RowOfBlobs => {
            let n = rng.random_range(3..=5);
            let cy = rng.random_range(0.25 * h..0.75 * h);
            let spacing = w / n as f64;
            (0..n)
                .map(|i| Shape::Ellipse {
                    cx: (i as f64 + 0.5) * spacing + rng.random_range(-0.1..0.1) * spacing,
                    cy: cy + rng.random_range(-0.06..0.06) * h,
                    rx: rng.random_range(0.3..0.48) * spacing,
                    ry: rng.random_range(0.1..0.2) * side,
                })
                .collect()
        }
        ShapeFamily::Disc => vec![Shape::Ellipse {
            cx: rng.random_range(0.35 * w..0.65 * w),
            cy: rng.random_range(0.35 * h..0.65 * h),
            rx: rng.random_range(0.25..0.4) * side,
            ry: rng.random_range(0.25..0.4) * side,
        }],
        ShapeFamily::TallColumn => {
            let n = rng.random_range(1..=2);
            let mut shapes = Vec::with_capacity(2 * n);
            for _ in 0..n {
                let cx = rng.random_range(0.2 * w..0.8 * w);
                let half = rng.random_range(0.05..0.1) * w;
                let top = rng.random_range(0.15..0.45) * h;
                shapes.push(Shape::Rect { x0: cx - half, y0: top, x1: cx + half, y1: h });
                shapes.push(Shape::Ellipse {
                    cx,
                    cy: top,
                    rx: rng.random_range(0.14..0.24) * w,
                    ry: rng.random_range(0.1..0.18) * h,
                });
            }
            shapes
        }
    }
}

fn draw_clutter(count: (usize, usize), w: f64, h: f64, rng: &mut impl Rng) -> Vec<Shape> {
    let n = rng.random_range(count.0..=count.1);
    let side = w.min(h);
    (0..n)
        .map(|_| Shape::Ellipse {
            cx: rng.random_range(0.0..w),
            cy: rng.random_range(0.0..h),
            rx: rng.random_range(0.05..0.14) * side,
            ry: rng.random_range(0.03..0.08) * side,
        })
        .collect()
}

fn domain_seed(seed: u64, name: &str) -> u64 {
    datamodel::domain_split_seed(seed, name)
}

/// Draws and renders one sample. Pure function of `(spec, seed, index)`.
pub fn generate_sample(spec: &ToyDomainSpec, seed: u64, index: usize) -> Result<(Raster, Mask, SampleRecord)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(domain_seed(seed, &spec.name), index as u64));
    let (w, h) = spec.image_size;
    let (fw, fh) = (w as f64, h as f64);
    let (lo, hi) = spec.foreground_band;
    let mut drawn = None;
    for _ in 0..MAX_ATTEMPTS {
        let shapes = draw_foreground(spec.shape_family, fw, fh, &mut rng);
        let mask = render_mask(&shapes, w, h);
        let f = mask.foreground_fraction();
        if f >= lo && f <= hi {
            drawn = Some((shapes, mask));
            break;
        }
    }
    let Some((foreground, mask)) = drawn else {
        return Err(Error::Config(format!(
            "toy domain '{}': no {:?} layout within foreground band ({lo}, {hi}) after {MAX_ATTEMPTS} draws",
            spec.name, spec.shape_family
        )));
    };
    let clutter = match &spec.clutter {
        Some(c) => draw_clutter(c.count, fw, fh, &mut rng),
        None => Vec::new(),
    };
    let fg = spec.foreground_palette.draw(&mut rng);
    let bg = spec.background_palette.draw(&mut rng);
    let cl = spec.clutter.as_ref().map(|c| c.palette.draw(&mut rng));
    // a soft left-to-right illumination ramp per image
    let light = rng.random_range(-0.08f32..0.08);
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let base = if mask.get(x, y) == 1 {
                fg
            } else if let Some(cl) = cl.filter(|_| clutter.iter().any(|s| s.contains(px, py))) {
                cl
            } else {
                bg
            };
            let shade = light * (2.0 * x as f32 / w as f32 - 1.0);
            for v in base {
                let noise = spec.texture_noise * rng.random_range(-1.0f32..=1.0);
                data.push((v + shade + noise).clamp(0.0, 1.0));
            }
        }
    }
    let image = Raster::new(w, h, 3, data)?;
    Ok((image, mask, SampleRecord { stem: format!("{index:05}"), foreground, clutter }))
}

/// Writes every domain of `specs` below `root` in the dataset layout and
/// returns the loaded manifest.
pub fn generate_toy_manifest(specs: &[ToyDomainSpec], root: &Path, seed: u64) -> Result<DatasetManifest> {
    if specs.is_empty() {
        return Err(Error::Config("no toy domains configured".into()));
    }
    let mut names = std::collections::BTreeSet::new();
    for spec in specs {
        spec.validate()?;
        if !names.insert(spec.name.as_str()) {
            return Err(Error::Config(format!("toy domain '{}' listed twice", spec.name)));
        }
    }
    for spec in specs {
        let dir = root.join(&spec.name);
        let images = dir.join(IMAGES_DIR);
        let masks = dir.join(MASKS_DIR);
        for d in [&images, &masks] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let mut records = Vec::with_capacity(spec.samples);
        for i in 0..spec.samples {
            let (image, mask, record) = generate_sample(spec, seed, i)?;
            datamodel::write_image(&images.join(format!("{}.png", record.stem)), &image)?;
            datamodel::write_mask(&masks.join(format!("{}.png", record.stem)), &mask)?;
            records.push(record);
        }
        write_file(&dir.join(META_FILE), format_meta(&spec.descriptor()).as_bytes())?;
        let record = GenerationRecord { seed, spec: spec.clone(), samples: records };
        write_file(&dir.join(GENERATION_FILE), serde_json::to_string_pretty(&record)?.as_bytes())?;
    }
    datamodel::load_manifest(root)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_generation_record(domain_dir: &Path) -> Result<GenerationRecord> {
    let path = domain_dir.join(GENERATION_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Paths of the generation records below a generated root.
pub fn generation_records(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path().join(GENERATION_FILE);
        if path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

const SOIL: Palette = Palette::new([0.42, 0.3, 0.2], [0.56, 0.42, 0.3]);
const DARK_SOIL: Palette = Palette::new([0.24, 0.17, 0.11], [0.34, 0.25, 0.17]);
const BRIGHT_GREEN: Palette = Palette::new([0.45, 0.74, 0.3], [0.6, 0.88, 0.44]);

fn spec(
    name: &str,
    family: ShapeFamily,
    fg: Palette,
    bg: Palette,
    noise: f32,
    clutter: Option<Clutter>,
    category: Category,
    height_m: Option<f64>,
    samples: usize,
    size: usize,
) -> ToyDomainSpec {
    ToyDomainSpec {
        name: name.into(),
        shape_family: family,
        foreground_palette: fg,
        background_palette: bg,
        texture_noise: noise,
        samples,
        image_size: (size, size),
        clutter,
        foreground_band: default_band(),
        source_type: SourceType::Synthetic,
        category,
        height_m,
    }
}

/// Four source-style domains: a tall tree, a medium leafy crop, a low bright
/// crop and a vineyard whose unlabeled grass has the low crop's colors.
pub fn default_suite(samples: usize, size: usize) -> Vec<ToyDomainSpec> {
    vec![
        spec(
            "ToyTree",
            ShapeFamily::TallColumn,
            Palette::new([0.18, 0.32, 0.1], [0.32, 0.48, 0.2]),
            Palette::new([0.55, 0.65, 0.8], [0.7, 0.8, 0.95]),
            0.05,
            None,
            Category::Tall,
            Some(4.0),
            samples,
            size,
        ),
        spec(
            "ToyChard",
            ShapeFamily::Blob,
            Palette::new([0.15, 0.48, 0.15], [0.3, 0.64, 0.26]),
            SOIL,
            0.08,
            None,
            Category::Medium,
            Some(0.5),
            samples,
            size,
        ),
        spec(
            "ToyLettuce",
            ShapeFamily::RowOfBlobs,
            BRIGHT_GREEN,
            DARK_SOIL,
            0.06,
            None,
            Category::Low,
            Some(0.22),
            samples,
            size,
        ),
        spec(
            "ToyVineyard",
            ShapeFamily::TallColumn,
            Palette::new([0.1, 0.34, 0.1], [0.2, 0.48, 0.2]),
            SOIL,
            0.1,
            Some(Clutter { palette: BRIGHT_GREEN, count: (2, 5) }),
            Category::Tall,
            Some(1.8),
            samples,
            size,
        ),
    ]
}

/// Additional held-out styles for fixed-source benchmarks.
pub fn extra_targets(samples: usize, size: usize) -> Vec<ToyDomainSpec> {
    let real = |name: &str, family, fg, bg, noise, clutter| {
        let mut s = spec(name, family, fg, bg, noise, clutter, Category::Any, None, samples, size);
        s.source_type = SourceType::Real;
        s
    };
    vec![
        real(
            "ToyRealField",
            ShapeFamily::RowOfBlobs,
            Palette::new([0.3, 0.55, 0.2], [0.45, 0.7, 0.35]),
            Palette::new([0.35, 0.3, 0.22], [0.5, 0.44, 0.34]),
            0.12,
            Some(Clutter { palette: Palette::new([0.3, 0.45, 0.2], [0.4, 0.6, 0.3]), count: (1, 3) }),
        ),
        real(
            "ToyRealOrchard",
            ShapeFamily::TallColumn,
            Palette::new([0.12, 0.3, 0.12], [0.25, 0.45, 0.22]),
            Palette::new([0.6, 0.7, 0.75], [0.8, 0.85, 0.9]),
            0.1,
            None,
        ),
        real(
            "ToyRealGarden",
            ShapeFamily::Blob,
            Palette::new([0.25, 0.6, 0.2], [0.4, 0.78, 0.35]),
            Palette::new([0.3, 0.22, 0.16], [0.42, 0.32, 0.24]),
            0.1,
            Some(Clutter { palette: Palette::new([0.5, 0.45, 0.4], [0.65, 0.6, 0.55]), count: (1, 4) }),
        ),
        real(
            "ToyRealMisc",
            ShapeFamily::Blob,
            Palette::new([0.2, 0.42, 0.15], [0.38, 0.6, 0.3]),
            Palette::new([0.45, 0.4, 0.3], [0.6, 0.55, 0.45]),
            0.15,
            Some(Clutter { palette: BRIGHT_GREEN, count: (0, 2) }),
        ),
    ]
}
