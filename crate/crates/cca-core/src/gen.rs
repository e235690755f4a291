//! Procedural multi-attribute image corpus.
//!
//! Each factor owns a disjoint pixel region, so the class of one attribute
//! can change without touching the others' evidence:
//!
//! ```text
//! ┌──────────────────────────┐  border ring (BorderWidth)
//! │ ░░░░░░ stripe band ░░░░░ │  vertical stripes (StripePeriod)
//! │ bg  ┌────────────┐   bg  │
//! │     │   glyph    │       │  centered glyph (ShapeGlyph)
//! │ bg  └────────────┘   bg  │  background (HueBand)
//! └──────────────────────────┘
//! ```
//!
//! An item's image is a pure function of (item seed, class labels); the seed
//! drives per-pixel noise and glyph jitter only.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ConditionId;
use crate::dataset::{
    AttributeSpec, DatasetManifest, FactorKind, Image, ItemRecord, LoadedDataset, Splits,
};
use crate::error::{Error, Result};
use crate::rng::{sub_rng, Domain};
use crate::triplet::ItemId;

pub const MIN_IMAGE_SIZE: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeGen {
    pub name: String,
    pub num_classes: u32,
    pub factor: FactorKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub gallery: usize,
    pub query: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            train: 2000,
            val: 400,
            gallery: 500,
            query: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub image_size: usize,
    pub attributes: Vec<AttributeGen>,
    pub counts: SplitCounts,
    /// Uniform per-pixel noise amplitude in 8-bit counts.
    pub noise: u8,
    /// Maximum glyph offset in pixels.
    pub jitter: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            image_size: 32,
            attributes: vec![
                AttributeGen {
                    name: "background_hue".into(),
                    num_classes: 3,
                    factor: FactorKind::HueBand,
                },
                AttributeGen {
                    name: "glyph_shape".into(),
                    num_classes: 3,
                    factor: FactorKind::ShapeGlyph,
                },
                AttributeGen {
                    name: "stripe_period".into(),
                    num_classes: 3,
                    factor: FactorKind::StripePeriod,
                },
                AttributeGen {
                    name: "border_width".into(),
                    num_classes: 3,
                    factor: FactorKind::BorderWidth,
                },
            ],
            counts: SplitCounts::default(),
            noise: 8,
            jitter: 2,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < MIN_IMAGE_SIZE {
            return Err(Error::Config(format!(
                "image size {} too small for the factor layout; need at least {MIN_IMAGE_SIZE}",
                self.image_size
            )));
        }
        if self.attributes.is_empty() {
            return Err(Error::Config("need at least one attribute".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for attr in &self.attributes {
            if attr.num_classes < 2 {
                return Err(Error::Config(format!(
                    "attribute {:?} needs at least 2 classes",
                    attr.name
                )));
            }
            let max = attr.factor.max_classes();
            if attr.num_classes as usize > max {
                return Err(Error::Config(format!(
                    "attribute {:?}: {:?} can render at most {max} distinct classes, got {}",
                    attr.name, attr.factor, attr.num_classes
                )));
            }
            if !seen.insert(attr.factor) {
                return Err(Error::Config(format!(
                    "factor {:?} assigned to more than one attribute",
                    attr.factor
                )));
            }
        }
        if self.counts.train + self.counts.val + self.counts.gallery + self.counts.query == 0 {
            return Err(Error::Config("dataset has zero items".into()));
        }
        Ok(())
    }

    pub fn total_items(&self) -> usize {
        self.counts.train + self.counts.val + self.counts.gallery + self.counts.query
    }
}

// ── factor regions ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
struct Layout {
    size: usize,
    ring_w: usize,
    stripe_top: usize,
    stripe_bottom: usize,
    glyph_top: usize,
    glyph_bottom: usize,
    glyph_left: usize,
    glyph_right: usize,
}

impl Layout {
    fn new(size: usize) -> Self {
        let ring_w = (size * 3 / 32).max(1);
        let stripe_h = (size * 5 / 32).max(2);
        let stripe_top = ring_w;
        let stripe_bottom = stripe_top + stripe_h;
        let gs = size / 2;
        let row_center = (stripe_bottom + (size - ring_w)) / 2;
        let glyph_top = row_center - gs / 2;
        let glyph_bottom = glyph_top + gs;
        let glyph_left = size / 2 - gs / 2;
        let glyph_right = glyph_left + gs;
        Layout {
            size,
            ring_w,
            stripe_top,
            stripe_bottom,
            glyph_top,
            glyph_bottom,
            glyph_left,
            glyph_right,
        }
    }

    fn in_ring(&self, y: usize, x: usize) -> bool {
        y < self.ring_w || y >= self.size - self.ring_w || x < self.ring_w || x >= self.size - self.ring_w
    }

    fn in_stripe(&self, y: usize, x: usize) -> bool {
        !self.in_ring(y, x) && y >= self.stripe_top && y < self.stripe_bottom
    }

    fn in_glyph(&self, y: usize, x: usize) -> bool {
        !self.in_ring(y, x)
            && !self.in_stripe(y, x)
            && y >= self.glyph_top
            && y < self.glyph_bottom
            && x >= self.glyph_left
            && x < self.glyph_right
    }

    fn region_of(&self, y: usize, x: usize) -> FactorKind {
        if self.in_ring(y, x) {
            FactorKind::BorderWidth
        } else if self.in_stripe(y, x) {
            FactorKind::StripePeriod
        } else if self.in_glyph(y, x) {
            FactorKind::ShapeGlyph
        } else {
            FactorKind::HueBand
        }
    }
}

/// Pixel mask (row-major over H×W) of the region owned by a factor.
pub fn factor_region(factor: FactorKind, image_size: usize) -> Vec<bool> {
    let layout = Layout::new(image_size);
    let mut mask = vec![false; image_size * image_size];
    for y in 0..image_size {
        for x in 0..image_size {
            mask[y * image_size + x] = layout.region_of(y, x) == factor;
        }
    }
    mask
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = (h / 60.0) % 6.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

const RING_BASE: [u8; 3] = [185, 185, 185];
const RING_BORDER: [u8; 3] = [45, 45, 45];
const STRIPE_DARK: [u8; 3] = [60, 60, 60];
const STRIPE_LIGHT: [u8; 3] = [200, 200, 200];
const GLYPH_BASE: [u8; 3] = [25, 25, 25];
const GLYPH_INK: [u8; 3] = [235, 235, 235];
const NEUTRAL_BG: [u8; 3] = [128, 128, 128];

/// Render one item. Pure in (labels, seed); factors without an attribute in
/// `attrs` fall back to a fixed class-0 appearance.
pub fn render_item(
    image_size: usize,
    attrs: &[AttributeSpec],
    labels: &[u32],
    seed: u64,
    noise: u8,
    jitter: usize,
) -> Image {
    let layout = Layout::new(image_size);
    let mut img = Image::new(3, image_size, image_size);
    let class_of = |factor: FactorKind| -> u32 {
        attrs
            .iter()
            .position(|a| a.factor == factor)
            .map(|i| labels[i])
            .unwrap_or(0)
    };
    let hue_classes = attrs
        .iter()
        .find(|a| a.factor == FactorKind::HueBand)
        .map(|a| a.num_classes)
        .unwrap_or(1);

    // jitter comes from the seed only, never from the labels
    let mut item_rng = ChaCha8Rng::seed_from_u64(seed);
    let (dy, dx) = if jitter > 0 {
        (
            item_rng.gen_range(-(jitter as i64)..=jitter as i64),
            item_rng.gen_range(-(jitter as i64)..=jitter as i64),
        )
    } else {
        (0, 0)
    };

    let hue_class = class_of(FactorKind::HueBand);
    let bg = if attrs.iter().any(|a| a.factor == FactorKind::HueBand) {
        hsv_to_rgb(360.0 * hue_class as f64 / hue_classes as f64, 0.6, 0.5)
    } else {
        NEUTRAL_BG
    };

    let border_width = class_of(FactorKind::BorderWidth) as usize + 1;
    let stripe_period = 4usize << class_of(FactorKind::StripePeriod);
    let glyph_class = class_of(FactorKind::ShapeGlyph);

    let gc_y = (layout.glyph_top + layout.glyph_bottom) as i64 / 2 + dy;
    let gc_x = (layout.glyph_left + layout.glyph_right) as i64 / 2 + dx;
    let half = ((layout.glyph_bottom - layout.glyph_top) / 2).saturating_sub(jitter + 1) as i64;

    for y in 0..image_size {
        for x in 0..image_size {
            let rgb = match layout.region_of(y, x) {
                FactorKind::HueBand => bg,
                FactorKind::BorderWidth => {
                    let depth = y
                        .min(x)
                        .min(image_size - 1 - y)
                        .min(image_size - 1 - x);
                    if depth < border_width {
                        RING_BORDER
                    } else {
                        RING_BASE
                    }
                }
                FactorKind::StripePeriod => {
                    let rel = x - layout.ring_w;
                    if rel % stripe_period < stripe_period / 2 {
                        STRIPE_LIGHT
                    } else {
                        STRIPE_DARK
                    }
                }
                FactorKind::ShapeGlyph => {
                    let ry = y as i64 - gc_y;
                    let rx = x as i64 - gc_x;
                    if glyph_hit(glyph_class, ry, rx, half) {
                        GLYPH_INK
                    } else {
                        GLYPH_BASE
                    }
                }
            };
            img.set(y, x, rgb);
        }
    }

    if noise > 0 {
        let amp = noise as i16;
        for v in img.pixels.iter_mut() {
            let delta = item_rng.gen_range(-amp..=amp);
            *v = (*v as i16 + delta).clamp(0, 255) as u8;
        }
    }
    img
}

fn glyph_hit(class: u32, ry: i64, rx: i64, half: i64) -> bool {
    match class {
        // filled square
        0 => ry.abs() <= half && rx.abs() <= half,
        // disc
        1 => ry * ry + rx * rx <= half * half,
        // upward triangle
        2 => ry >= -half && ry <= half && rx.abs() <= (ry + half) / 2,
        // cross
        3 => (ry.abs() <= half / 2 && rx.abs() <= half) || (rx.abs() <= half / 2 && ry.abs() <= half),
        // diamond
        _ => ry.abs() + rx.abs() <= half,
    }
}

fn balanced_labels(count: usize, classes: u32, rng: &mut impl Rng) -> Vec<u32> {
    let mut labels: Vec<u32> = (0..count).map(|i| (i as u32) % classes).collect();
    labels.shuffle(rng);
    labels
}

/// Generate manifest plus images. Per-item work is independent, so it can
/// run on a thread pool; results are identical either way.
pub fn generate(cfg: &GenConfig, master_seed: u64, threads: usize) -> Result<LoadedDataset> {
    cfg.validate()?;
    let mut data_rng = sub_rng(master_seed, Domain::Data, 0);
    let total = cfg.total_items();

    // independent balanced shuffles per attribute and split keep attributes
    // uncorrelated while guaranteeing each class has members
    let split_sizes = [
        cfg.counts.train,
        cfg.counts.val,
        cfg.counts.gallery,
        cfg.counts.query,
    ];
    let mut labels_per_item: Vec<Vec<u32>> = vec![Vec::with_capacity(cfg.attributes.len()); total];
    for attr in &cfg.attributes {
        let mut offset = 0;
        for &size in &split_sizes {
            let labels = balanced_labels(size, attr.num_classes, &mut data_rng);
            for (i, label) in labels.into_iter().enumerate() {
                labels_per_item[offset + i].push(label);
            }
            offset += size;
        }
    }

    let attributes: Vec<AttributeSpec> = cfg
        .attributes
        .iter()
        .enumerate()
        .map(|(i, a)| AttributeSpec {
            id: ConditionId(i as u32),
            name: a.name.clone(),
            num_classes: a.num_classes,
            factor: a.factor,
        })
        .collect();

    let items: Vec<ItemRecord> = labels_per_item
        .into_iter()
        .enumerate()
        .map(|(i, labels)| ItemRecord {
            id: ItemId(i as u32),
            labels,
            seed: data_rng.gen::<u64>(),
        })
        .collect();

    let ids = |lo: usize, hi: usize| (lo..hi).map(|i| ItemId(i as u32)).collect::<Vec<_>>();
    let t = cfg.counts.train;
    let v = t + cfg.counts.val;
    let g = v + cfg.counts.gallery;
    let q = g + cfg.counts.query;
    let manifest = DatasetManifest {
        version: 1,
        image_size: cfg.image_size,
        channels: 3,
        attributes,
        items,
        splits: Splits {
            train: ids(0, t),
            val: ids(t, v),
            gallery: ids(v, g),
            query: ids(g, q),
        },
    };
    manifest.validate()?;

    let render = |item: &ItemRecord| {
        (
            item.id,
            render_item(
                cfg.image_size,
                &manifest.attributes,
                &item.labels,
                item.seed,
                cfg.noise,
                cfg.jitter,
            ),
        )
    };
    let images: std::collections::BTreeMap<ItemId, Image> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            manifest.items.par_iter().map(render).collect()
        })
    } else {
        manifest.items.iter().map(render).collect()
    };

    Ok(LoadedDataset { manifest, images })
}
