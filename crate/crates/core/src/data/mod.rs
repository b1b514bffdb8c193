//! Geo-tagged patches on disk.
//!
//! Directory layout:
//!
//! ```text
//! <root>/<domain>/img/<patch_id>.bin    image raster, bands interleaved
//! <root>/<domain>/msk/<patch_id>.bin    label raster (labeled domains only)
//! <root>/<domain>/meta/<patch_id>.txt   metadata record
//! <root>/eval_labels/<patch_id>.bin     held-out labels of unlabeled domains
//! ```
//!
//! A domain is *labeled* when it has a `msk/` directory. [`Dataset`] never
//! reads `eval_labels/`; only [`crate::training::evaluate`] does.

pub mod format;
pub mod synthetic;
pub mod transform;

use std::fs;
use std::path::{Path, PathBuf};

use crate::class_balance::LabelMap;
use crate::error::{Error, Result};
use crate::geo_encoding::{RawCoordinate, TimeStamp};
use crate::network::Tensor;

pub use synthetic::{generate_synthetic, SyntheticConfig};
pub use transform::{augment, augment_with, crop_at, four_crop, random_crop, reassemble_quadrants, AugmentDraw};

/// Ground sample distance in meters per pixel.
pub const GSD_M: f64 = 0.2;

pub const EVAL_LABELS_DIR: &str = "eval_labels";

/// `height x width x bands` raster, bands interleaved per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, bands: usize) -> Self {
        Self { height, width, bands, data: vec![0.0; height * width * bands] }
    }

    pub fn get(&self, row: usize, col: usize, band: usize) -> f32 {
        self.data[(row * self.width + col) * self.bands + band]
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let o = (row * self.width + col) * self.bands;
        &self.data[o..o + self.bands]
    }

    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f32] {
        let o = (row * self.width + col) * self.bands;
        &mut self.data[o..o + self.bands]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchMeta {
    pub patch_id: String,
    pub domain: String,
    /// Two-letter land-cover zone, letters from `U`, `N`, `A`, `F`.
    pub zone: String,
    pub month: u8,
    pub hour: u8,
    pub centroid_lon_m: f64,
    pub centroid_lat_m: f64,
    pub altitude_m: f64,
    pub camera: String,
}

impl PatchMeta {
    pub fn validate(&self) -> Result<()> {
        TimeStamp::new(self.month, self.hour)?;
        if !self.centroid_lon_m.is_finite() || !self.centroid_lat_m.is_finite() || !self.altitude_m.is_finite() {
            return Err(Error::InvalidInput(format!("patch {}: non-finite coordinates", self.patch_id)));
        }
        if self.patch_id.is_empty() || self.patch_id.contains(['/', '\\']) {
            return Err(Error::InvalidInput(format!("invalid patch id `{}`", self.patch_id)));
        }
        Ok(())
    }

    pub fn centroid(&self) -> RawCoordinate {
        RawCoordinate::new(self.centroid_lon_m, self.centroid_lat_m)
    }

    pub fn timestamp(&self) -> TimeStamp {
        TimeStamp { month: self.month, hour: self.hour }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub image: Image,
    pub label: Option<LabelMap>,
    pub meta: PatchMeta,
}

impl Patch {
    pub fn side(&self) -> usize {
        self.image.height
    }
}

/// Stacks images into an `[N, B, H, W]` tensor.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Tensor> {
    let images: Vec<&Image> = images.into_iter().collect();
    let Some(first) = images.first() else {
        return Err(Error::InvalidInput("cannot stack an empty batch".into()));
    };
    let (h, w, b) = (first.height, first.width, first.bands);
    let mut data = Vec::with_capacity(images.len() * h * w * b);
    for img in &images {
        if (img.height, img.width, img.bands) != (h, w, b) {
            return Err(Error::Shape("batch images differ in size".into()));
        }
        for band in 0..b {
            data.extend(img.data.iter().skip(band).step_by(b).map(|&v| v as f64));
        }
    }
    Tensor::from_vec(&[images.len(), b, h, w], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadOptions {
    pub bands: usize,
    /// Evaluable classes; label value `num_classes` is "other".
    pub num_classes: usize,
    /// Map every label above this value to "other" before validation.
    pub merge_above: Option<u8>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { bands: 5, num_classes: 12, merge_above: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainEntry {
    pub name: String,
    pub labeled: bool,
    /// Sorted patch ids.
    pub patch_ids: Vec<String>,
}

/// Immutable listing of a dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub domains: Vec<DomainEntry>,
    pub options: LoadOptions,
}

fn sorted_stems(dir: &Path, ext: &str) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push(stem.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Lists domains and patches under `root`. Missing metadata for a present
/// image is reported here; raster contents are checked on load.
pub fn load_dataset(root: &Path, options: LoadOptions) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::dataset(root, "dataset root is not a directory"));
    }
    let mut names = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.path().is_dir() && name != EVAL_LABELS_DIR && entry.path().join("img").is_dir() {
            names.push(name);
        }
    }
    names.sort();
    let mut domains = Vec::with_capacity(names.len());
    for name in names {
        let dir = root.join(&name);
        let patch_ids = sorted_stems(&dir.join("img"), "bin")?;
        for id in &patch_ids {
            let meta = dir.join("meta").join(format!("{id}.txt"));
            if !meta.is_file() {
                return Err(Error::dataset(meta, format!("patch `{id}` has an image but no metadata")));
            }
        }
        let labeled = dir.join("msk").is_dir();
        domains.push(DomainEntry { name, labeled, patch_ids });
    }
    Ok(Dataset { root: root.to_path_buf(), domains, options })
}

impl Dataset {
    pub fn domain(&self, name: &str) -> Result<&DomainEntry> {
        self.domains
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::dataset(&self.root, format!("no domain `{name}`")))
    }

    pub fn labeled_domains(&self) -> Vec<String> {
        self.domains.iter().filter(|d| d.labeled).map(|d| d.name.clone()).collect()
    }

    pub fn unlabeled_domains(&self) -> Vec<String> {
        self.domains.iter().filter(|d| !d.labeled).map(|d| d.name.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.domains.iter().map(|d| d.patch_ids.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn load_patch(&self, domain: &str, patch_id: &str) -> Result<Patch> {
        let entry = self.domain(domain)?;
        let dir = self.root.join(domain);
        let img_path = dir.join("img").join(format!("{patch_id}.bin"));
        let image = format::read_image(&img_path)?;
        if image.bands != self.options.bands {
            return Err(Error::dataset(
                img_path,
                format!("patch `{patch_id}` has {} bands, expected {}", image.bands, self.options.bands),
            ));
        }
        if image.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::dataset(img_path, format!("patch `{patch_id}` has non-finite pixels")));
        }
        let meta = format::read_meta(&dir.join("meta").join(format!("{patch_id}.txt")))?;
        let label = if entry.labeled {
            let path = dir.join("msk").join(format!("{patch_id}.bin"));
            let label = self.check_label(&path, patch_id, format::read_label(&path)?)?;
            if (label.height, label.width) != (image.height, image.width) {
                return Err(Error::dataset(path, format!("patch `{patch_id}` label size differs from image")));
            }
            Some(label)
        } else {
            None
        };
        Ok(Patch { image, label, meta })
    }

    pub(crate) fn check_label(&self, path: &Path, patch_id: &str, mut label: LabelMap) -> Result<LabelMap> {
        if let Some(k) = self.options.merge_above {
            let other = self.options.num_classes as u8;
            label.data.iter_mut().filter(|v| **v > k).for_each(|v| *v = other);
        }
        if let Some(bad) = label.data.iter().find(|&&v| v as usize > self.options.num_classes) {
            return Err(Error::dataset(
                path,
                format!("patch `{patch_id}` has label {bad} above {}", self.options.num_classes),
            ));
        }
        Ok(label)
    }

    /// All patches of a domain in patch-id order.
    pub fn load_domain(&self, domain: &str) -> Result<Vec<Patch>> {
        let entry = self.domain(domain)?;
        entry.patch_ids.iter().map(|id| self.load_patch(domain, id)).collect()
    }

    /// Iterates every patch, domains then patch ids in sorted order.
    pub fn patches(&self) -> impl Iterator<Item = Result<Patch>> + '_ {
        self.domains
            .iter()
            .flat_map(move |d| d.patch_ids.iter().map(move |id| self.load_patch(&d.name, id)))
    }
}

/// Writes one patch into the directory layout. Labels of unlabeled domains
/// go to the held-out directory.
pub fn write_patch(root: &Path, patch: &Patch, labeled: bool) -> Result<()> {
    let id = &patch.meta.patch_id;
    let dir = root.join(&patch.meta.domain);
    format::write_image(&dir.join("img").join(format!("{id}.bin")), &patch.image)?;
    format::write_meta(&dir.join("meta").join(format!("{id}.txt")), &patch.meta)?;
    if let Some(label) = &patch.label {
        let path = if labeled {
            dir.join("msk").join(format!("{id}.bin"))
        } else {
            root.join(EVAL_LABELS_DIR).join(format!("{id}.bin"))
        };
        format::write_label(&path, label)?;
    }
    Ok(())
}
