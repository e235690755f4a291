//! On-disk dataset format: a JSON manifest plus raw RGB image files.
//!
//! Directory layout:
//! ```text
//! <dataset>/
//!   manifest.json
//!   images/item_00000.rgb
//!   images/item_00001.rgb
//!   ...
//! ```
//! An image file is a little-endian header (channels, height, width as u32)
//! followed by channel-major 8-bit pixel bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ConditionId;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::triplet::{ItemId, LabelTable};

/// Procedural factor behind one attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    /// Background color band.
    HueBand,
    /// Centered glyph shape.
    ShapeGlyph,
    /// Vertical stripe frequency in a horizontal band.
    StripePeriod,
    /// Frame thickness.
    BorderWidth,
}

impl FactorKind {
    pub fn all() -> [FactorKind; 4] {
        [
            FactorKind::HueBand,
            FactorKind::ShapeGlyph,
            FactorKind::StripePeriod,
            FactorKind::BorderWidth,
        ]
    }

    /// How many classes the recipe can render distinctly.
    pub fn max_classes(self) -> usize {
        match self {
            FactorKind::HueBand => 8,
            FactorKind::ShapeGlyph => 5,
            FactorKind::StripePeriod => 4,
            FactorKind::BorderWidth => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub id: ConditionId,
    pub name: String,
    pub num_classes: u32,
    pub factor: FactorKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub id: ItemId,
    /// One class label per attribute, attribute order.
    pub labels: Vec<u32>,
    /// Drives per-item noise and jitter.
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<ItemId>,
    pub val: Vec<ItemId>,
    pub gallery: Vec<ItemId>,
    pub query: Vec<ItemId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub image_size: usize,
    pub channels: usize,
    pub attributes: Vec<AttributeSpec>,
    pub items: Vec<ItemRecord>,
    pub splits: Splits,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::Dataset(format!("unsupported manifest version {}", self.version)));
        }
        let mut factors = BTreeSet::new();
        for (i, attr) in self.attributes.iter().enumerate() {
            if attr.id.index() != i {
                return Err(Error::Dataset(format!(
                    "attribute {:?} has id {} but position {i}",
                    attr.name, attr.id
                )));
            }
            if attr.num_classes < 2 {
                return Err(Error::Dataset(format!(
                    "attribute {:?} has {} classes; need at least 2",
                    attr.name, attr.num_classes
                )));
            }
            if !factors.insert(attr.factor) {
                return Err(Error::Dataset(format!(
                    "factor {:?} is used by more than one attribute",
                    attr.factor
                )));
            }
        }
        let mut ids = BTreeSet::new();
        for item in &self.items {
            if !ids.insert(item.id) {
                return Err(Error::Dataset(format!("duplicate item id {}", item.id)));
            }
            if item.labels.len() != self.attributes.len() {
                return Err(Error::Dataset(format!(
                    "item {} labels {} attributes, expected {}",
                    item.id,
                    item.labels.len(),
                    self.attributes.len()
                )));
            }
            for (attr, &label) in self.attributes.iter().zip(&item.labels) {
                if label >= attr.num_classes {
                    return Err(Error::Dataset(format!(
                        "item {} has label {label} for attribute {:?} with {} classes",
                        item.id, attr.name, attr.num_classes
                    )));
                }
            }
        }
        let mut seen = BTreeSet::new();
        for (name, split) in [
            ("train", &self.splits.train),
            ("val", &self.splits.val),
            ("gallery", &self.splits.gallery),
            ("query", &self.splits.query),
        ] {
            for id in split {
                if !ids.contains(id) {
                    return Err(Error::Dataset(format!("split {name:?} references unknown item {id}")));
                }
                if !seen.insert(*id) {
                    return Err(Error::Dataset(format!(
                        "item {id} appears in more than one split (second: {name:?})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn item(&self, id: ItemId) -> Option<&ItemRecord> {
        self.items.iter().find(|it| it.id == id)
    }

    pub fn attribute_names(&self) -> Vec<String> {
        self.attributes.iter().map(|a| a.name.clone()).collect()
    }

    /// Labels of the given items as a table for sampling and evaluation.
    pub fn label_table(&self, ids: &[ItemId]) -> Result<LabelTable> {
        let mut table = LabelTable::new(self.attributes.len());
        for &id in ids {
            let item = self
                .item(id)
                .ok_or_else(|| Error::Dataset(format!("unknown item {id}")))?;
            table.insert(id, item.labels.clone())?;
        }
        Ok(table)
    }
}

/// 8-bit image, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Image {
            channels,
            height,
            width,
            pixels: vec![0; channels * height * width],
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        c * self.height * self.width + y * self.width + x
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        for c in 0..self.channels.min(3) {
            let i = self.idx(c, y, x);
            self.pixels[i] = rgb[c];
        }
    }

    /// Map to a [C, H, W] tensor in [-1, 1].
    pub fn to_tensor(&self) -> Tensor {
        let data: Vec<f64> = self.pixels.iter().map(|&v| v as f64 / 127.5 - 1.0).collect();
        Tensor::new(vec![self.channels, self.height, self.width], data)
            .expect("image dims agree with pixel count")
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        for dim in [self.channels, self.height, self.width] {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        w.write_all(&self.pixels)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut header = [0u8; 12];
        r.read_exact(&mut header)?;
        let channels = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let expected = channels
            .checked_mul(height)
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| Error::Dataset("image dimensions overflow".into()))?;
        let mut pixels = vec![0u8; expected];
        r.read_exact(&mut pixels)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Dataset("trailing bytes after image pixels".into()));
        }
        Ok(Image {
            channels,
            height,
            width,
            pixels,
        })
    }
}

pub fn image_file_name(id: ItemId) -> String {
    format!("item_{:05}.rgb", id.0)
}

/// A dataset held fully in memory.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub images: BTreeMap<ItemId, Image>,
}

impl LoadedDataset {
    pub fn image_tensor(&self, id: ItemId) -> Result<Tensor> {
        self.images
            .get(&id)
            .map(|img| img.to_tensor())
            .ok_or_else(|| Error::Dataset(format!("no image for item {id}")))
    }
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

pub fn save_dataset(dir: &Path, dataset: &LoadedDataset) -> Result<()> {
    dataset.manifest.validate()?;
    fs::create_dir_all(dir.join("images"))?;
    let json = serde_json::to_string_pretty(&dataset.manifest)?;
    fs::write(manifest_path(dir), json)?;
    for (id, image) in &dataset.images {
        let file = fs::File::create(dir.join("images").join(image_file_name(*id)))?;
        image.write_to(std::io::BufWriter::new(file))?;
    }
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = manifest_path(dir);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let manifest = load_manifest(dir)?;
    let mut images = BTreeMap::new();
    for item in &manifest.items {
        let path = dir.join("images").join(image_file_name(item.id));
        let file = fs::File::open(&path).map_err(|_| {
            Error::Dataset(format!(
                "missing image file for item {}: {}",
                item.id,
                path.display()
            ))
        })?;
        let image = Image::read_from(std::io::BufReader::new(file))?;
        if image.height != manifest.image_size
            || image.width != manifest.image_size
            || image.channels != manifest.channels
        {
            return Err(Error::Dataset(format!(
                "image for item {} has dims {}x{}x{}, manifest says {}x{}x{}",
                item.id,
                image.channels,
                image.height,
                image.width,
                manifest.channels,
                manifest.image_size,
                manifest.image_size
            )));
        }
        images.insert(item.id, image);
    }
    Ok(LoadedDataset { manifest, images })
}
