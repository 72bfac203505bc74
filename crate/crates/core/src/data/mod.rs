//! Dataset manifests, image/mask ingestion, low-resolution simulation and
//! one-hot targets.

pub mod synthetic;
pub mod templates;

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::FeatureMap;

pub use synthetic::{generate_synthetic, SyntheticConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
}

fn default_in_channels() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    /// `[height, width]` the images and masks are brought to.
    pub hr_size: [usize; 2],
    pub lr_factor: usize,
    /// Explicit `[height, width]` of the simulated input when it is not an
    /// exact division of `hr_size`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_size: Option<[usize; 2]>,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Parses and validates the manifest metadata without touching the
    /// referenced files.
    pub fn from_json_str(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        m.validate_metadata()?;
        Ok(m)
    }

    pub fn validate_metadata(&self) -> Result<()> {
        let [h, w] = self.hr_size;
        if h == 0 || w == 0 {
            return Err(Error::Validation(format!("hr_size must be positive, got {:?}", self.hr_size)));
        }
        if self.lr_factor == 0 {
            return Err(Error::Validation("lr_factor must be >= 1".into()));
        }
        match self.lr_size {
            None if h % self.lr_factor != 0 || w % self.lr_factor != 0 => {
                return Err(Error::Validation(format!(
                    "hr_size {h}x{w} is not divisible by lr_factor {}",
                    self.lr_factor
                )));
            }
            Some([lh, lw]) if lh == 0 || lw == 0 || lh > h || lw > w => {
                return Err(Error::Validation(format!("lr_size {lh}x{lw} is not within hr_size {h}x{w}")));
            }
            _ => {}
        }
        if !matches!(self.in_channels, 1 | 3) {
            return Err(Error::Validation(format!("in_channels must be 1 or 3, got {}", self.in_channels)));
        }
        if self.entries.is_empty() {
            return Err(Error::Validation("manifest has no entries".into()));
        }
        Ok(())
    }

    /// `[height, width]` of the network input.
    pub fn lr_size(&self) -> [usize; 2] {
        self.lr_size
            .unwrap_or([self.hr_size[0] / self.lr_factor, self.hr_size[1] / self.lr_factor])
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Reads a manifest, resolves entry paths relative to its directory and
/// checks that every referenced file exists.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut m = DatasetManifest::from_json_str(&text).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let base = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let base = std::fs::canonicalize(&base).unwrap_or(base);
    for e in &mut m.entries {
        for p in [&mut e.image, &mut e.mask] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
            if !p.is_file() {
                return Err(Error::Load {
                    path: p.clone(),
                    reason: "referenced file does not exist".into(),
                });
            }
        }
    }
    Ok(m)
}

/// A binary (or small-label) mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn fraction_positive(&self) -> f64 {
        self.data.iter().filter(|&&v| v > 0).count() as f64 / self.data.len() as f64
    }
}

/// High-resolution image, its mask and the simulated low-resolution input.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub hr_image: FeatureMap,
    pub hr_mask: Mask,
    pub lr_image: FeatureMap,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DownsampleFilter {
    /// Box average over `factor x factor` blocks; for factor 2 this equals
    /// half-pixel bilinear sampling.
    #[default]
    Area,
    Bicubic,
}

/// Downsamples by an integer factor with block averaging.
pub fn simulate_lr(hr: &FeatureMap, factor: usize) -> Result<FeatureMap> {
    simulate_lr_with(hr, factor, DownsampleFilter::Area)
}

pub fn simulate_lr_with(hr: &FeatureMap, factor: usize, filter: DownsampleFilter) -> Result<FeatureMap> {
    let [b, c, h, w] = hr.shape();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(shape_err(format!("{h}x{w} is not divisible by factor {factor}")));
    }
    match filter {
        DownsampleFilter::Area => {
            let (oh, ow) = (h / factor, w / factor);
            let inv = 1.0 / (factor * factor) as f64;
            Ok(FeatureMap::from_fn([b, c, oh, ow], |bi, ci, y, x| {
                let plane = hr.plane(bi, ci);
                let mut acc = 0.0;
                for dy in 0..factor {
                    let row = (y * factor + dy) * w + x * factor;
                    acc += plane[row..row + factor].iter().sum::<f64>();
                }
                acc * inv
            }))
        }
        DownsampleFilter::Bicubic => resample(hr, h / factor, w / factor, FilterType::CatmullRom),
    }
}

/// Resamples every plane to `height` x `width` with an antialiased filter.
pub fn resample(x: &FeatureMap, height: usize, width: usize, filter: FilterType) -> Result<FeatureMap> {
    let [b, c, h, w] = x.shape();
    let mut out = FeatureMap::zeros([b, c, height, width]);
    for bi in 0..b {
        for ci in 0..c {
            let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
                ImageBuffer::from_raw(w as u32, h as u32, x.plane(bi, ci).iter().map(|&v| v as f32).collect())
                    .ok_or_else(|| shape_err("plane buffer size"))?;
            let r = image::imageops::resize(&buf, width as u32, height as u32, filter);
            for (d, s) in out.plane_mut(bi, ci).iter_mut().zip(r.into_raw()) {
                *d = s as f64;
            }
        }
    }
    Ok(out)
}

/// One channel per class; channel `i` is the indicator of label `i`.
pub fn to_onehot(mask: &Mask, n_classes: usize) -> Result<FeatureMap> {
    if let Some(&bad) = mask.data.iter().find(|&&v| v as usize >= n_classes) {
        return Err(Error::Validation(format!("label {bad} out of range for {n_classes} classes")));
    }
    let mut out = FeatureMap::zeros([1, n_classes, mask.height, mask.width]);
    for c in 0..n_classes {
        for (d, &v) in out.plane_mut(0, c).iter_mut().zip(&mask.data) {
            *d = (v as usize == c) as u8 as f64;
        }
    }
    Ok(out)
}

/// Per-pixel argmax over the class axis of a single-item map.
pub fn argmax_classes(x: &FeatureMap) -> Mask {
    let [_, c, h, w] = x.shape();
    let data = (0..h * w)
        .map(|p| {
            (0..c)
                .max_by(|&a, &b| x.plane(0, a)[p].total_cmp(&x.plane(0, b)[p]).then(b.cmp(&a)))
                .unwrap_or(0) as u8
        })
        .collect();
    Mask { height: h, width: w, data }
}

/// Converts an image to a `[1, channels, h, w]` map scaled to [0, 1].
pub fn image_to_map(img: &DynamicImage, channels: usize) -> Result<FeatureMap> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw: Vec<f32> = match channels {
        1 => img.to_luma32f().into_raw(),
        3 => img.to_rgb32f().into_raw(),
        c => return Err(Error::Config(format!("unsupported channel count {c}"))),
    };
    Ok(FeatureMap::from_fn([1, channels, h, w], |_, c, y, x| {
        raw[(y * w + x) * channels + c] as f64
    }))
}

/// Reads a mask image; {0, 255} (or {0, 1}) map to {0, 1}.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .into_raw()
        .into_iter()
        .map(|v| match v {
            0 => Ok(0),
            1 | 255 => Ok(1),
            other => Err(Error::Validation(format!(
                "{}: mask value {other} is neither 0 nor 255",
                path.display()
            ))),
        })
        .collect::<Result<Vec<u8>>>()?;
    Mask::new(h, w, data)
}

fn resize_mask(m: &Mask, height: usize, width: usize) -> Mask {
    let data = (0..height * width)
        .map(|i| {
            let (y, x) = (i / width, i % width);
            let sy = (y * m.height) / height;
            let sx = (x * m.width) / width;
            m.data[sy * m.width + sx]
        })
        .collect();
    Mask { height, width, data }
}

/// Loads one manifest entry at the manifest's HR size and simulates its
/// low-resolution input.
pub fn load_sample(entry: &ManifestEntry, manifest: &DatasetManifest) -> Result<SamplePair> {
    let [h, w] = manifest.hr_size;
    let img = image::open(&entry.image)?;
    let img = if (img.width() as usize, img.height() as usize) != (w, h) {
        img.resize_exact(w as u32, h as u32, FilterType::Triangle)
    } else {
        img
    };
    let hr_image = image_to_map(&img, manifest.in_channels)?;
    let mut hr_mask = read_mask(&entry.mask)?;
    if (hr_mask.height, hr_mask.width) != (h, w) {
        hr_mask = resize_mask(&hr_mask, h, w);
    }
    let lr_image = match manifest.lr_size {
        None => simulate_lr(&hr_image, manifest.lr_factor)?,
        Some([lh, lw]) => resample(&hr_image, lh, lw, FilterType::Triangle)?,
    };
    Ok(SamplePair {
        hr_image,
        hr_mask,
        lr_image,
    })
}

/// In-memory train/test samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub train: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
}

impl Dataset {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let load = |split| -> Result<Vec<SamplePair>> {
            manifest.entries(split).map(|e| load_sample(e, manifest)).collect()
        };
        Ok(Self {
            name: manifest.name.clone(),
            train: load(Split::Train)?,
            test: load(Split::Test)?,
        })
    }

    /// The first `n_train` samples train, the rest test.
    pub fn from_samples(name: impl Into<String>, mut samples: Vec<SamplePair>, n_train: usize) -> Self {
        let test = samples.split_off(n_train.min(samples.len()));
        Self {
            name: name.into(),
            train: samples,
            test,
        }
    }

    pub fn split(&self, split: Split) -> &[SamplePair] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

/// Train count for a 75/25 split of `n` items, keeping at least one test
/// item when `n >= 2`.
pub fn default_train_count(n: usize) -> usize {
    if n < 2 {
        return n;
    }
    (n * 3 / 4).clamp(1, n - 1)
}
