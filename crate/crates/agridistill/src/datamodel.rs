//! On-disk domain registry, sample decoding and source/target task construction.
//!
//! Layout: `root/<domain>/images/*.png`, `root/<domain>/masks/*.png` with
//! matching stems, and `root/<domain>/meta`, a `key = value` file with the
//! keys `name`, `samples`, `type`, `category` and `height_m`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use agridistill_core::domain::{Category, DomainDescriptor, SourceType};
use agridistill_core::raster::{Mask, Raster, Sample};
use agridistill_core::split::{derive_seed, split_indices};
use image::{GrayImage, ImageReader, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const META_FILE: &str = "meta";
pub const IMAGES_DIR: &str = "images";
pub const MASKS_DIR: &str = "masks";

/// Separator between an optional variant tag and the sample id in file stems.
const VARIANT_SEPARATOR: &str = "__";

/// Paths of one image/mask pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePaths {
    pub image: PathBuf,
    pub mask: PathBuf,
}

impl SamplePaths {
    pub fn stem(&self) -> String {
        self.image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    }

    /// Sub-dataset tag taken from a `<variant>__<id>` stem.
    pub fn variant(&self) -> Option<String> {
        let stem = self.stem();
        stem.split_once(VARIANT_SEPARATOR).map(|(v, _)| v.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub domains: Vec<DomainDescriptor>,
    pub index: BTreeMap<String, Vec<SamplePaths>>,
}

/// Parses the flat `key = value` metadata text of one domain.
pub fn parse_meta(text: &str, origin: &Path) -> Result<DomainDescriptor> {
    let mut fields = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=').or_else(|| line.split_once(':')) else {
            return Err(Error::Manifest(format!("{}:{}: expected `key = value`", origin.display(), lineno + 1)));
        };
        fields.insert(key.trim().to_ascii_lowercase(), value.trim().to_string());
    }
    let get = |key: &str| {
        fields
            .get(key)
            .ok_or_else(|| Error::Manifest(format!("{}: missing key `{key}`", origin.display())))
    };
    let bad = |key: &str, e: String| Error::Manifest(format!("{}: bad `{key}`: {e}", origin.display()));
    let name = get("name")?.clone();
    if name.is_empty() {
        return Err(bad("name", "empty".into()));
    }
    let sample_count = get("samples")?.parse::<usize>().map_err(|e| bad("samples", e.to_string()))?;
    let source_type = get("type")?.parse::<SourceType>().map_err(|e| bad("type", e.to_string()))?;
    let category = get("category")?.parse::<Category>().map_err(|e| bad("category", e.to_string()))?;
    let height_m = match fields.get("height_m").map(String::as_str) {
        None | Some("" | "-" | "unspecified" | "none") => None,
        Some(v) => {
            let h = v.trim_end_matches('m').trim().parse::<f64>().map_err(|e| bad("height_m", e.to_string()))?;
            if !h.is_finite() || h < 0.0 {
                return Err(bad("height_m", format!("{h} is not a non-negative length")));
            }
            Some(h)
        }
    };
    Ok(DomainDescriptor { name, sample_count, source_type, category, height_m })
}

pub fn format_meta(d: &DomainDescriptor) -> String {
    let height = d.height_m.map_or_else(|| "unspecified".to_string(), |h| h.to_string());
    format!(
        "name = {}\nsamples = {}\ntype = {}\ncategory = {}\nheight_m = {}\n",
        d.name, d.sample_count, d.source_type, d.category, height
    )
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            out.insert(stem, path);
        }
    }
    Ok(out)
}

fn dimensions(path: &Path) -> Result<(u32, u32)> {
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .into_dimensions()
        .map_err(|e| Error::Integrity(format!("{}: cannot decode: {e}", path.display())))
}

/// Scans and validates a dataset root.
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Integrity(format!("{}: no domain directories", root.display())));
    }
    let mut domains = Vec::with_capacity(dirs.len());
    let mut index = BTreeMap::new();
    for dir in dirs {
        let meta_path = dir.join(META_FILE);
        let text = match fs::read_to_string(&meta_path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::Manifest(format!("{}: missing metadata file", meta_path.display())))
            }
            Err(e) => return Err(Error::io(&meta_path, e)),
        };
        let descriptor = parse_meta(&text, &meta_path)?;
        if index.contains_key(&descriptor.name) {
            return Err(Error::Manifest(format!("duplicate domain name '{}'", descriptor.name)));
        }
        let images = png_stems(&dir.join(IMAGES_DIR))?;
        let masks = png_stems(&dir.join(MASKS_DIR))?;
        if let Some((_, path)) = images.iter().find(|(stem, _)| !masks.contains_key(*stem)) {
            return Err(Error::Integrity(format!("{}: image has no mask", path.display())));
        }
        if let Some((_, path)) = masks.iter().find(|(stem, _)| !images.contains_key(*stem)) {
            return Err(Error::Integrity(format!("{}: mask has no image", path.display())));
        }
        let mut pairs = Vec::with_capacity(images.len());
        for (stem, image) in images {
            let mask = masks[&stem].clone();
            if dimensions(&image)? != dimensions(&mask)? {
                return Err(Error::Integrity(format!("{}: image and mask sizes differ", image.display())));
            }
            pairs.push(SamplePaths { image, mask });
        }
        if pairs.len() != descriptor.sample_count {
            return Err(Error::Integrity(format!(
                "{}: metadata declares {} samples, found {}",
                dir.display(),
                descriptor.sample_count,
                pairs.len()
            )));
        }
        index.insert(descriptor.name.clone(), pairs);
        domains.push(descriptor);
    }
    Ok(DatasetManifest { root: root.to_path_buf(), domains, index })
}

impl DatasetManifest {
    pub fn domain_names(&self) -> Vec<&str> {
        self.domains.iter().map(|d| d.name.as_str()).collect()
    }

    pub fn descriptor(&self, name: &str) -> Result<&DomainDescriptor> {
        self.domains.iter().find(|d| d.name == name).ok_or_else(|| Error::Lookup(name.to_string()))
    }

    /// File-backed dataset of one domain; samples decode on access.
    pub fn dataset(&self, name: &str) -> Result<DomainDataset> {
        self.descriptor(name)?;
        let items = self.index[name]
            .iter()
            .map(|p| Arc::new(Item::File { paths: p.clone(), domain: name.to_string() }))
            .collect();
        Ok(DomainDataset { name: name.to_string(), items })
    }

    /// Structured-text export of the whole manifest.
    pub fn export_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug)]
enum Item {
    File { paths: SamplePaths, domain: String },
    Memory(Sample),
}

/// An ordered, cheaply clonable collection of samples (possibly pooled from
/// several domains).
#[derive(Debug, Clone)]
pub struct DomainDataset {
    name: String,
    items: Vec<Arc<Item>>,
}

impl DomainDataset {
    pub fn from_samples(name: impl Into<String>, samples: Vec<Sample>) -> Self {
        Self { name: name.into(), items: samples.into_iter().map(|s| Arc::new(Item::Memory(s))).collect() }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> Result<Sample> {
        let item = self
            .items
            .get(i)
            .ok_or_else(|| Error::Argument(format!("sample {i} out of range for '{}' ({})", self.name, self.len())))?;
        match item.as_ref() {
            Item::Memory(s) => Ok(s.clone()),
            Item::File { paths, domain } => read_sample(paths, domain),
        }
    }

    /// Domain name of sample `i` without decoding it.
    pub fn domain_of(&self, i: usize) -> Option<&str> {
        self.items.get(i).map(|item| match item.as_ref() {
            Item::Memory(s) => s.domain.as_str(),
            Item::File { domain, .. } => domain.as_str(),
        })
    }

    /// Distinct domain names present, in first-occurrence order.
    pub fn domains(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        (0..self.len()).filter_map(|i| self.domain_of(i)).filter(|d| seen.insert(*d)).map(str::to_string).collect()
    }

    /// Decodes every sample into memory.
    pub fn materialize(&self) -> Result<Self> {
        let items = (0..self.len())
            .map(|i| match self.items[i].as_ref() {
                Item::Memory(_) => Ok(self.items[i].clone()),
                Item::File { .. } => Ok(Arc::new(Item::Memory(self.get(i)?))),
            })
            .collect::<Result<_>>()?;
        Ok(Self { name: self.name.clone(), items })
    }

    pub fn subset(&self, name: impl Into<String>, indices: &[usize]) -> Result<Self> {
        let items = indices
            .iter()
            .map(|&i| {
                self.items
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::Argument(format!("sample {i} out of range for '{}'", self.name)))
            })
            .collect::<Result<_>>()?;
        Ok(Self { name: name.into(), items })
    }

    /// Pools several datasets in order.
    pub fn concat(name: impl Into<String>, parts: &[DomainDataset]) -> Self {
        Self { name: name.into(), items: parts.iter().flat_map(|p| p.items.iter().cloned()).collect() }
    }
}

/// Deterministic train/validation partition with `round(val_fraction * n)` validation samples.
pub fn split_train_val(
    dataset: &DomainDataset,
    val_fraction: f64,
    seed: u64,
) -> Result<(DomainDataset, DomainDataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Argument(format!("val_fraction must lie in (0, 1), got {val_fraction}")));
    }
    if dataset.is_empty() {
        return Err(Error::Argument(format!("cannot split empty dataset '{}'", dataset.name())));
    }
    let (train, val) = split_indices(dataset.len(), val_fraction, seed)?;
    Ok((
        dataset.subset(format!("{}/train", dataset.name()), &train)?,
        dataset.subset(format!("{}/val", dataset.name()), &val)?,
    ))
}

/// Splits every source separately (domain `k` with seed `derive_seed(seed, k)`)
/// and pools the parts.
pub fn split_sources(
    sources: &[DomainDataset],
    val_fraction: f64,
    seed: u64,
) -> Result<(DomainDataset, DomainDataset)> {
    let mut trains = Vec::with_capacity(sources.len());
    let mut vals = Vec::with_capacity(sources.len());
    for source in sources {
        let (t, v) = split_train_val(source, val_fraction, domain_split_seed(seed, source.name()))?;
        trains.push(t);
        vals.push(v);
    }
    let name = sources.iter().map(DomainDataset::name).collect::<Vec<_>>().join("+");
    Ok((DomainDataset::concat(format!("{name}/train"), &trains), DomainDataset::concat(format!("{name}/val"), &vals)))
}

/// Split seed of one domain; depends on the domain's name, not its position,
/// so a domain is partitioned identically in every task it appears in.
pub fn domain_split_seed(seed: u64, domain: &str) -> u64 {
    let h = domain.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3));
    derive_seed(seed, h)
}

/// Source domains, a held-out target and the validation fraction for the sources.
#[derive(Debug, Clone)]
pub struct DGTask {
    sources: Vec<DomainDataset>,
    target: DomainDataset,
    pub val_fraction: f64,
}

impl DGTask {
    pub fn new(sources: Vec<DomainDataset>, target: DomainDataset, val_fraction: f64) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::Argument("a task needs at least one source domain".into()));
        }
        if !(val_fraction > 0.0 && val_fraction < 1.0) {
            return Err(Error::Argument(format!("val_fraction must lie in (0, 1), got {val_fraction}")));
        }
        let mut names = BTreeSet::new();
        for s in &sources {
            if !names.insert(s.name()) {
                return Err(Error::Argument(format!("source '{}' listed twice", s.name())));
            }
        }
        if names.contains(target.name()) {
            return Err(Error::Argument(format!("target '{}' is also a source", target.name())));
        }
        Ok(Self { sources, target, val_fraction })
    }

    pub fn sources(&self) -> &[DomainDataset] {
        &self.sources
    }

    pub fn target(&self) -> &DomainDataset {
        &self.target
    }

    pub fn source_names(&self) -> Vec<&str> {
        self.sources.iter().map(DomainDataset::name).collect()
    }
}

pub const DEFAULT_VAL_FRACTION: f64 = 0.1;

fn check_names(manifest: &DatasetManifest, names: &[String]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for name in names {
        manifest.descriptor(name)?;
        if !seen.insert(name) {
            return Err(Error::Argument(format!("domain '{name}' listed twice")));
        }
    }
    Ok(())
}

/// One task per listed domain: that domain is the target, the others are sources.
pub fn leave_one_out_tasks(manifest: &DatasetManifest, names: &[String], val_fraction: f64) -> Result<Vec<DGTask>> {
    if names.len() < 2 {
        return Err(Error::Argument(format!("leave-one-out needs at least 2 domains, got {}", names.len())));
    }
    check_names(manifest, names)?;
    agridistill_core::split::leave_one_out(names.len())?
        .into_iter()
        .map(|(sources, target)| {
            let sources = sources.iter().map(|&s| manifest.dataset(&names[s])).collect::<Result<_>>()?;
            DGTask::new(sources, manifest.dataset(&names[target])?, val_fraction)
        })
        .collect()
}

/// One task per extra target, each trained on all of `sources`.
pub fn fixed_source_tasks(
    manifest: &DatasetManifest,
    sources: &[String],
    targets: &[String],
    val_fraction: f64,
) -> Result<Vec<DGTask>> {
    if targets.is_empty() {
        return Err(Error::Argument("fixed-source benchmarks need at least one extra target".into()));
    }
    check_names(manifest, sources)?;
    check_names(manifest, targets)?;
    let datasets: Vec<DomainDataset> = sources.iter().map(|s| manifest.dataset(s)).collect::<Result<_>>()?;
    targets.iter().map(|t| DGTask::new(datasets.clone(), manifest.dataset(t)?, val_fraction)).collect()
}

pub fn read_image(path: &Path) -> Result<Raster> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect();
    Ok(Raster::new(w as usize, h as usize, 3, data)?)
}

/// Decodes an 8-bit mask whose pixels are 0 or 255.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_luma8();
    let (w, h) = img.dimensions();
    let mut data = Vec::with_capacity((w * h) as usize);
    for v in img.into_raw() {
        data.push(match v {
            0 => 0,
            255 => 1,
            other => {
                return Err(Error::Integrity(format!("{}: mask value {other} is neither 0 nor 255", path.display())))
            }
        });
    }
    Ok(Mask::new(w as usize, h as usize, data)?)
}

fn read_sample(paths: &SamplePaths, domain: &str) -> Result<Sample> {
    let image = read_image(&paths.image)?;
    let mask = read_mask(&paths.mask)?;
    Sample::new(image, mask, domain)
        .map_err(|e| Error::Integrity(format!("{}: {e}", paths.image.display())))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `[0, 1]` raster with 1 or 3 channels as PNG.
pub fn write_image(path: &Path, image: &Raster) -> Result<()> {
    let (w, h) = (image.width() as u32, image.height() as u32);
    let encoded = match image.channels() {
        3 => RgbImage::from_raw(w, h, image.data().iter().map(|&v| to_u8(v)).collect()).map(image::DynamicImage::from),
        1 => GrayImage::from_raw(w, h, image.data().iter().map(|&v| to_u8(v)).collect()).map(image::DynamicImage::from),
        c => return Err(Error::Argument(format!("cannot encode a {c}-channel raster"))),
    };
    encoded
        .expect("buffer length matches dimensions")
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let data = mask.data().iter().map(|&v| v * 255).collect();
    GrayImage::from_raw(mask.width() as u32, mask.height() as u32, data)
        .expect("buffer length matches dimensions")
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}
