//! Synthetic detection scenes: flat-colored disks, squares and triangles on a
//! noisy background, with exact boxes.
//!
//! A scene is a pure function of `(seed, DatasetConfig)`. Training scenes use
//! seeds `0..n`, validation scenes `VALIDATION_SEED_BASE..`.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Instance};
use crate::tensor::io::{put_f32, put_u32, put_u64, ByteReader};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 5] = b"TDSET";
pub const DATASET_VERSION: u32 = 1;
/// First seed of the validation split.
pub const VALIDATION_SEED_BASE: u64 = 1 << 32;

/// Class names in class-id order.
pub const CLASS_NAMES: [&str; 3] = ["disk", "square", "triangle"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub image_size: usize,
    /// Number of shape classes, at most 3.
    pub classes: usize,
    pub max_per_scene: usize,
    pub occlusion_allowed: bool,
    pub noise_sigma: f64,
    /// Range of the shape extent in pixels.
    pub min_size: f64,
    pub max_size: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            classes: 3,
            max_per_scene: 4,
            occlusion_allowed: false,
            noise_sigma: 0.05,
            min_size: 16.0,
            max_size: 56.0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > CLASS_NAMES.len() {
            return Err(Error::Config(format!("classes must be in 1..=3, got {}", self.classes)));
        }
        if self.max_per_scene == 0 {
            return Err(Error::Config("max_per_scene must be at least 1".into()));
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return Err(Error::Config(format!("noise_sigma must be non-negative, got {}", self.noise_sigma)));
        }
        if !(self.min_size >= 8.0 && self.min_size <= self.max_size && self.max_size <= self.image_size as f64) {
            return Err(Error::Config(format!(
                "shape sizes [{}, {}] must satisfy 8 <= min <= max <= image_size {}",
                self.min_size, self.max_size, self.image_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    /// `[H, W, 3]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub instances: Vec<Instance>,
    pub seed: u64,
}

/// Direction the triangle apex points to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    Up,
    Down,
    Left,
    Right,
}

/// One shape to rasterize, in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeSpec {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    /// Diameter, side, or base and height of the triangle.
    pub size: f64,
    pub orientation: Orientation,
    pub color: [f32; 3],
}

impl ShapeSpec {
    /// Whether the pixel centered at `(x, y)` is covered.
    pub fn covers(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let h = self.size / 2.0;
        match self.class_id {
            0 => dx * dx + dy * dy <= h * h,
            1 => dx.abs() <= h && dy.abs() <= h,
            _ => {
                // Apex at distance h along the axis, base at -h; half-width
                // shrinks linearly from h at the base to 0 at the apex.
                let (along, across) = match self.orientation {
                    Orientation::Up => (-dy, dx),
                    Orientation::Down => (dy, dx),
                    Orientation::Left => (-dx, dy),
                    Orientation::Right => (dx, dy),
                };
                along >= -h && along <= h && across.abs() <= (h - along) / 2.0
            }
        }
    }

    /// Tight pixel box of the covered pixels, `None` when nothing is covered.
    pub fn pixel_box(&self, image_size: usize) -> Option<BBox> {
        let h = self.size / 2.0 + 1.0;
        let lo = |c: f64| ((c - h).floor().max(0.0)) as usize;
        let hi = |c: f64| ((c + h).ceil().max(0.0) as usize).min(image_size);
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        for i in lo(self.cy)..hi(self.cy) {
            for j in lo(self.cx)..hi(self.cx) {
                if self.covers(j as f64 + 0.5, i as f64 + 0.5) {
                    x1 = x1.min(j);
                    y1 = y1.min(i);
                    x2 = x2.max(j + 1);
                    y2 = y2.max(i + 1);
                }
            }
        }
        (x1 != usize::MAX).then_some(BBox {
            x1: x1 as f64,
            y1: y1 as f64,
            x2: x2 as f64,
            y2: y2 as f64,
        })
    }
}

/// Paints `shapes` in order over a flat background, then adds noise.
pub fn render<R: Rng>(size: usize, background: [f32; 3], shapes: &[ShapeSpec], noise_sigma: f64, rng: &mut R) -> Tensor<f32> {
    let mut img = Tensor::from_fn(&[size, size, 3], |k| background[k % 3]);
    for s in shapes {
        let Some(b) = s.pixel_box(size) else { continue };
        for i in b.y1 as usize..b.y2 as usize {
            for j in b.x1 as usize..b.x2 as usize {
                if s.covers(j as f64 + 0.5, i as f64 + 0.5) {
                    img.data_mut()[(i * size + j) * 3..][..3].copy_from_slice(&s.color);
                }
            }
        }
    }
    if noise_sigma > 0.0 {
        let noise = Normal::new(0.0, noise_sigma).expect("validated sigma");
        for v in img.data_mut() {
            *v = (*v as f64 + noise.sample(rng)).clamp(0.0, 1.0) as f32;
        }
    }
    img
}

const PLACEMENT_TRIES: usize = 50;
const SEPARATION: f64 = 2.0;

fn boxes_clash(a: &BBox, b: &BBox) -> bool {
    a.x1 < b.x2 + SEPARATION && b.x1 < a.x2 + SEPARATION && a.y1 < b.y2 + SEPARATION && b.y1 < a.y2 + SEPARATION
}

fn random_shape<R: Rng>(rng: &mut R, cfg: &DatasetConfig) -> ShapeSpec {
    let size = rng.random_range(cfg.min_size..=cfg.max_size);
    let margin = size / 2.0 + 1.0;
    let span = cfg.image_size as f64 - margin;
    let cx = rng.random_range(margin.min(span)..=span.max(margin));
    let cy = rng.random_range(margin.min(span)..=span.max(margin));
    let class_id = rng.random_range(0..cfg.classes);
    let orientation = [Orientation::Up, Orientation::Down, Orientation::Left, Orientation::Right][rng.random_range(0..4)];
    let color = [0; 3].map(|_| {
        if rng.random_bool(0.5) {
            rng.random_range(0.0..0.2f32)
        } else {
            rng.random_range(0.8..1.0f32)
        }
    });
    ShapeSpec { class_id, cx, cy, size, orientation, color }
}

/// Deterministic scene for `seed`.
///
/// The instance count is drawn in `1..=max_per_scene`; shapes that cannot be
/// placed within a bounded number of tries are dropped, so a scene may hold
/// fewer, but never zero.
pub fn generate_scene(seed: u64, cfg: &DatasetConfig) -> Result<SceneRecord> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = [0; 3].map(|_| rng.random_range(0.3..0.7f32));
    let target = rng.random_range(1..=cfg.max_per_scene);
    let mut shapes: Vec<ShapeSpec> = Vec::new();
    let mut instances: Vec<Instance> = Vec::new();
    for _ in 0..target {
        for _ in 0..PLACEMENT_TRIES {
            let s = random_shape(&mut rng, cfg);
            let Some(b) = s.pixel_box(cfg.image_size) else { continue };
            if b.width() < 8.0 || b.height() < 8.0 {
                continue;
            }
            if !cfg.occlusion_allowed && instances.iter().any(|i| boxes_clash(&i.bbox, &b)) {
                continue;
            }
            shapes.push(s);
            instances.push(Instance { bbox: b, class_id: s.class_id });
            break;
        }
    }
    let image = render(cfg.image_size, background, &shapes, cfg.noise_sigma, &mut rng);
    Ok(SceneRecord { image, instances, seed })
}

/// Scenes for seeds `first..first + count`.
pub fn generate_split(first: u64, count: usize, cfg: &DatasetConfig) -> Result<Vec<SceneRecord>> {
    (0..count as u64).map(|k| generate_scene(first + k, cfg)).collect()
}

pub fn train_seeds(n: usize) -> std::ops::Range<u64> {
    0..n as u64
}

pub fn validation_seeds(n: usize) -> std::ops::Range<u64> {
    VALIDATION_SEED_BASE..VALIDATION_SEED_BASE + n as u64
}

/// Serializes records in the dataset file format.
pub fn dataset_to_bytes(records: &[SceneRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    put_u32(&mut out, DATASET_VERSION);
    put_u32(&mut out, u32::try_from(records.len()).map_err(|_| Error::InvalidArgument("too many records".into()))?);
    for r in records {
        put_u64(&mut out, r.seed);
        r.image.write_tnsr(&mut out);
        put_u32(&mut out, r.instances.len() as u32);
        for i in &r.instances {
            for v in i.bbox.to_array() {
                put_f32(&mut out, v as f32);
            }
            put_u32(&mut out, i.class_id as u32);
        }
    }
    Ok(out)
}

/// Parses a dataset file. Any malformation yields [`Error::Format`] with the
/// byte offset where parsing stopped; no partial result is returned.
pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Vec<SceneRecord>> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(DATASET_MAGIC, "dataset magic")?;
    let at = r.offset();
    let version = r.u32("dataset version")?;
    if version != DATASET_VERSION {
        return Err(Error::format(at, format!("unsupported dataset version {version}")));
    }
    let count = r.u32("record count")? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let seed = r.u64("record seed")?;
        let at = r.offset();
        let image = r.tensor()?;
        if image.shape().len() != 3 || image.shape()[2] != 3 {
            return Err(Error::format(at, format!("image shape {:?} is not [H, W, 3]", image.shape())));
        }
        let n = r.u32("instance count")? as usize;
        let mut instances = Vec::with_capacity(n.min(1 << 10));
        for _ in 0..n {
            let at = r.offset();
            let b = [r.f32("box")?, r.f32("box")?, r.f32("box")?, r.f32("box")?].map(f64::from);
            let class_id = r.u32("class id")? as usize;
            let bbox = BBox::from_array(b).map_err(|e| Error::format(at, e.to_string()))?;
            instances.push(Instance { bbox, class_id });
        }
        records.push(SceneRecord { image, instances, seed });
    }
    r.finish("dataset")?;
    Ok(records)
}

pub fn write_dataset(records: &[SceneRecord], path: &Path) -> Result<()> {
    std::fs::write(path, dataset_to_bytes(records)?).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<SceneRecord>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    dataset_from_bytes(&bytes)
}
