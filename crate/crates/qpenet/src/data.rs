//! Episodic data pipeline: base/novel fold splits, a synthetic multi-shape
//! benchmark generated on demand, and an indexed-PNG dataset directory
//! ingest. Every sample is a function of (spec, seed, index), so the whole
//! pipeline replays bit-identically.
//!
//! Synthetic images hold two shapes of different classes on a weakly textured
//! background. A class fixes both a shape family and a hue band, so the
//! segmenter has to match the support's class rather than grab any salient
//! blob; shapes of held-out classes still appear as distractors inside
//! training images, which is exactly the contamination the background
//! cleansing path exists for.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{align_mask, Annotated, Episode, Mask};

/// Which side of the base/novel partition a run draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TrainOnBase,
    EvalOnNovel,
}

/// Even partition of class ids `1..=n_classes` into folds; the fold's own
/// chunk is novel, the rest is base.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub n_classes: u32,
    pub n_folds: u32,
    pub fold_index: u32,
    pub split: Split,
}

impl FoldSpec {
    pub fn new(n_classes: u32, n_folds: u32, fold_index: u32, split: Split) -> Result<Self> {
        if n_folds == 0 || fold_index >= n_folds {
            return Err(Error::InvalidConfig(format!(
                "fold_index {fold_index} out of range for {n_folds} folds"
            )));
        }
        if n_classes < n_folds {
            return Err(Error::InvalidConfig(format!(
                "cannot split {n_classes} classes into {n_folds} folds"
            )));
        }
        Ok(Self {
            n_classes,
            n_folds,
            fold_index,
            split,
        })
    }

    /// Classes held out as novel for this fold (contiguous chunk).
    pub fn novel_classes(&self) -> Vec<u32> {
        let n = self.n_classes as usize;
        let f = self.n_folds as usize;
        let i = self.fold_index as usize;
        let lo = i * n / f;
        let hi = (i + 1) * n / f;
        ((lo + 1) as u32..=(hi as u32)).collect()
    }

    pub fn base_classes(&self) -> Vec<u32> {
        let novel = self.novel_classes();
        (1..=self.n_classes).filter(|c| !novel.contains(c)).collect()
    }

    /// The class set this spec's split samples from.
    pub fn active_classes(&self) -> Vec<u32> {
        match self.split {
            Split::TrainOnBase => self.base_classes(),
            Split::EvalOnNovel => self.novel_classes(),
        }
    }
}

/// Parameters of the on-demand synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub n_classes: u32,
    /// Per-pixel texture noise sigma on background and shapes.
    pub noise_sigma: f64,
    /// Primary shape radius as a fraction of the image size.
    pub scale_range: (f64, f64),
    /// Secondary (distractor) shape radius fraction.
    pub secondary_scale_range: (f64, f64),
    /// Shapes drawn per image; the first is the largest.
    pub shapes_per_image: usize,
    /// Number of indexable samples per pool.
    pub pool_size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_classes: 8,
            noise_sigma: 0.04,
            scale_range: (0.17, 0.32),
            secondary_scale_range: (0.12, 0.20),
            shapes_per_image: 2,
            pool_size: 4096,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ShapeFamily {
    Disk,
    Ring,
    Square,
    Diamond,
    Triangle,
    Cross,
    Bar,
    Star,
}

const FAMILIES: [ShapeFamily; 8] = [
    ShapeFamily::Disk,
    ShapeFamily::Ring,
    ShapeFamily::Square,
    ShapeFamily::Diamond,
    ShapeFamily::Triangle,
    ShapeFamily::Cross,
    ShapeFamily::Bar,
    ShapeFamily::Star,
];

fn family_of(class_id: u32) -> ShapeFamily {
    FAMILIES[((class_id - 1) as usize) % FAMILIES.len()]
}

/// Class hue bands are spread over the hue circle; instances jitter inside
/// their band. Appearance correlates with class, as it does for real object
/// categories, which is what makes one support informative about the query.
fn class_color(class_id: u32, n_classes: u32, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let hue = (class_id - 1) as f64 / n_classes as f64 + 0.035 * (rng.random::<f64>() - 0.5);
    let sat = 0.6 + 0.35 * rng.random::<f64>();
    let val = 0.6 + 0.35 * rng.random::<f64>();
    hsv_to_rgb(hue.rem_euclid(1.0), sat, val)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Debug, Clone)]
struct ShapeSpec {
    class_id: u32,
    family: ShapeFamily,
    center: (f64, f64),
    radius: f64,
    angle: f64,
    color: [f64; 3],
}

impl ShapeSpec {
    /// Membership test in unit shape coordinates.
    fn contains(&self, y: f64, x: f64) -> bool {
        let (cy, cx) = self.center;
        let dy = (y - cy) / self.radius;
        let dx = (x - cx) / self.radius;
        let (sin, cos) = self.angle.sin_cos();
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        match self.family {
            ShapeFamily::Disk => u * u + v * v <= 1.0,
            ShapeFamily::Ring => {
                let r2 = u * u + v * v;
                (0.45 * 0.45..=1.0).contains(&r2)
            }
            ShapeFamily::Square => u.abs() <= 0.82 && v.abs() <= 0.82,
            ShapeFamily::Diamond => u.abs() + v.abs() <= 1.1,
            ShapeFamily::Triangle => {
                // Equilateral triangle pointing along +v.
                let a = (1.25 * v + 0.55) >= 0.0;
                let b = (-0.625 * v - 1.0825 * u + 0.55) >= 0.0;
                let c = (-0.625 * v + 1.0825 * u + 0.55) >= 0.0;
                a && b && c
            }
            ShapeFamily::Cross => {
                (u.abs() <= 0.34 && v.abs() <= 1.0) || (v.abs() <= 0.34 && u.abs() <= 1.0)
            }
            ShapeFamily::Bar => u.abs() <= 1.0 && v.abs() <= 0.36,
            ShapeFamily::Star => {
                let rho = (u * u + v * v).sqrt();
                let phi = v.atan2(u);
                rho <= 0.42 + 0.58 * (2.0 * phi).cos().abs()
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Scene {
    /// Draw order; later shapes occlude earlier ones.
    shapes: Vec<ShapeSpec>,
    bg_color: [f64; 3],
    gradient: (f64, f64, f64),
    noise_seed: u64,
}

/// On-demand synthetic source. Sample `index` is a pure function of the spec.
#[derive(Debug, Clone)]
pub struct SyntheticSource {
    pub spec: SyntheticSpec,
    /// class id -> indices of pool samples whose mask contains it.
    pools: BTreeMap<u32, Vec<usize>>,
}

impl SyntheticSource {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        if spec.n_classes == 0 || spec.image_size < 16 {
            return Err(Error::InvalidConfig(
                "synthetic spec needs classes and image_size >= 16".into(),
            ));
        }
        if !(1..=3).contains(&spec.shapes_per_image) {
            return Err(Error::InvalidConfig("shapes_per_image must be 1..=3".into()));
        }
        let mut pools: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for index in 0..spec.pool_size {
            let scene = scene_for(&spec, index);
            for class in scene_classes(&spec, &scene) {
                pools.entry(class).or_default().push(index);
            }
        }
        Ok(Self { spec, pools })
    }

    pub fn pool(&self, class_id: u32) -> &[usize] {
        self.pools.get(&class_id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Render sample `index`: RGB image in `[0, 1]` and the class-id mask.
    pub fn load(&self, index: usize) -> (Array3<f64>, Array2<u8>) {
        render(&self.spec, &scene_for(&self.spec, index))
    }
}

fn mix(seed: u64, index: u64) -> u64 {
    // splitmix64 over (seed, index) for independent per-sample streams.
    let mut z = seed ^ index.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn scene_for(spec: &SyntheticSpec, index: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, index as u64));
    let size = spec.image_size as f64;

    let mut class_ids: Vec<u32> = (1..=spec.n_classes).collect();
    class_ids.shuffle(&mut rng);
    class_ids.truncate(spec.shapes_per_image);

    let mut shapes = Vec::with_capacity(class_ids.len());
    for (slot, &class_id) in class_ids.iter().enumerate() {
        let (lo, hi) = if slot == 0 {
            spec.scale_range
        } else {
            spec.secondary_scale_range
        };
        let radius = size * (lo + (hi - lo) * rng.random::<f64>());
        let margin = radius * 0.8;
        let center = loop {
            let cy = margin + (size - 2.0 * margin) * rng.random::<f64>();
            let cx = margin + (size - 2.0 * margin) * rng.random::<f64>();
            // Keep centers apart so distractors stay mostly visible.
            let ok = shapes.iter().all(|s: &ShapeSpec| {
                let d = ((cy - s.center.0).powi(2) + (cx - s.center.1).powi(2)).sqrt();
                d >= 0.75 * (radius + s.radius)
            });
            if ok {
                break (cy, cx);
            }
            // Crowded image: accept overlap rather than loop forever.
            if rng.random::<f64>() < 0.05 {
                break (cy, cx);
            }
        };
        shapes.push(ShapeSpec {
            class_id,
            family: family_of(class_id),
            center,
            radius,
            angle: rng.random::<f64>() * 2.0 * PI,
            color: class_color(class_id, spec.n_classes, &mut rng),
        });
    }
    // Largest drawn last would hide distractors; draw primary first so the
    // secondary occludes only fringes.
    let bg_value = 0.3 + 0.4 * rng.random::<f64>();
    let bg_sat = 0.12 * rng.random::<f64>();
    let bg_color = hsv_to_rgb(rng.random::<f64>(), bg_sat, bg_value);
    let gradient = (
        rng.random::<f64>() * 2.0 * PI,
        0.04 + 0.06 * rng.random::<f64>(),
        rng.random::<f64>() * 2.0 * PI,
    );
    Scene {
        shapes,
        bg_color,
        gradient,
        noise_seed: rng.random(),
    }
}

/// Rasterize only the mask and report classes with enough surviving pixels
/// to matter after occlusion (at least 2 feature cells at an 8x downsample).
fn scene_classes(spec: &SyntheticSpec, scene: &Scene) -> Vec<u32> {
    let mask = rasterize_mask(spec, scene);
    let min_pixels = (spec.image_size / 8).pow(2).max(16) * 2;
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &v in mask.iter() {
        if v != 0 {
            *counts.entry(v as u32).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .filter(|&(_, n)| n >= min_pixels)
        .map(|(c, _)| c)
        .collect()
}

fn rasterize_mask(spec: &SyntheticSpec, scene: &Scene) -> Array2<u8> {
    let n = spec.image_size;
    let mut mask = Array2::zeros((n, n));
    for shape in &scene.shapes {
        // Shapes never reach past 1.3 radii in unit coordinates.
        let reach = shape.radius * 1.3 + 1.0;
        let lo_i = ((shape.center.0 - reach).floor().max(0.0)) as usize;
        let hi_i = ((shape.center.0 + reach).ceil() as usize).min(n);
        let lo_j = ((shape.center.1 - reach).floor().max(0.0)) as usize;
        let hi_j = ((shape.center.1 + reach).ceil() as usize).min(n);
        for i in lo_i..hi_i {
            for j in lo_j..hi_j {
                if shape.contains(i as f64 + 0.5, j as f64 + 0.5) {
                    mask[[i, j]] = shape.class_id as u8;
                }
            }
        }
    }
    mask
}

fn render(spec: &SyntheticSpec, scene: &Scene) -> (Array3<f64>, Array2<u8>) {
    let n = spec.image_size;
    let mask = rasterize_mask(spec, scene);
    let mut image = Array3::zeros((n, n, 3));
    let (gdir, gamp, gphase) = scene.gradient;
    let (gsin, gcos) = gdir.sin_cos();
    let mut noise = ChaCha8Rng::seed_from_u64(scene.noise_seed);
    for i in 0..n {
        for j in 0..n {
            let wave = ((i as f64 * gsin + j as f64 * gcos) * 0.22 + gphase).sin() * gamp;
            let base = match mask[[i, j]] {
                0 => scene.bg_color,
                id => {
                    let shape = scene
                        .shapes
                        .iter()
                        .rev()
                        .find(|s| s.class_id as u8 == id)
                        .expect("mask id always comes from a shape");
                    shape.color
                }
            };
            for ch in 0..3 {
                let noise_v = (noise.random::<f64>() - 0.5) * 2.0 * spec.noise_sigma;
                image[[i, j, ch]] = (base[ch] + wave + noise_v).clamp(0.0, 1.0);
            }
        }
    }
    (image, mask)
}

/// Sample index over an images/ + masks/ directory pair.
#[derive(Debug, Clone)]
pub struct RealSource {
    pub items: Vec<RealItem>,
    pools: BTreeMap<u32, Vec<usize>>,
    pub image_size: usize,
}

#[derive(Debug, Clone)]
pub struct RealItem {
    pub stem: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub classes: Vec<u32>,
}

/// Pixel value marking ignored regions in mask files.
pub const IGNORE_LABEL: u8 = 255;

#[cfg(feature = "real-data")]
impl RealSource {
    /// Index a dataset directory: `root/images/*.png` with matching
    /// `root/masks/*.png` whose pixel values are class ids (0 background,
    /// 255 ignore). Every image must have a mask; items whose masks carry no
    /// class end up in no pool.
    pub fn ingest(root: &Path) -> Result<Self> {
        let images_dir = root.join("images");
        let masks_dir = root.join("masks");
        if !images_dir.is_dir() || !masks_dir.is_dir() {
            return Err(Error::Dataset(format!(
                "{} must contain images/ and masks/",
                root.display()
            )));
        }
        let mut stems: Vec<String> = std::fs::read_dir(&images_dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let p = e.path();
                (p.extension().and_then(|x| x.to_str()) == Some("png"))
                    .then(|| p.file_stem().unwrap().to_string_lossy().into_owned())
            })
            .collect();
        stems.sort();
        if stems.is_empty() {
            return Err(Error::Dataset(format!(
                "no PNG images under {}",
                images_dir.display()
            )));
        }
        let mut items = Vec::with_capacity(stems.len());
        let mut pools: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        let mut image_size = None;
        for stem in stems {
            let image_path = images_dir.join(format!("{stem}.png"));
            let mask_path = masks_dir.join(format!("{stem}.png"));
            if !mask_path.is_file() {
                return Err(Error::Dataset(format!("image {stem} has no mask")));
            }
            let mask = load_mask_png(&mask_path)?;
            let (h, w) = mask.dim();
            if h != w {
                return Err(Error::Dataset(format!("mask {stem} is not square")));
            }
            match image_size {
                None => image_size = Some(h),
                Some(s) if s != h => {
                    return Err(Error::Dataset(format!(
                        "mask {stem} is {h}px but the dataset is {s}px"
                    )))
                }
                _ => {}
            }
            let mut classes: Vec<u32> = mask
                .iter()
                .filter(|&&v| v != 0 && v != IGNORE_LABEL)
                .map(|&v| v as u32)
                .collect();
            classes.sort_unstable();
            classes.dedup();
            let idx = items.len();
            for &c in &classes {
                pools.entry(c).or_default().push(idx);
            }
            items.push(RealItem {
                stem,
                image_path,
                mask_path,
                classes,
            });
        }
        Ok(Self {
            items,
            pools,
            image_size: image_size.unwrap(),
        })
    }

    pub fn pool(&self, class_id: u32) -> &[usize] {
        self.pools.get(&class_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn load(&self, index: usize) -> Result<(Array3<f64>, Array2<u8>)> {
        let item = &self.items[index];
        let image = load_image_png(&item.image_path)?;
        let mask = load_mask_png(&item.mask_path)?;
        if image.dim().0 != mask.dim().0 || image.dim().1 != mask.dim().1 {
            return Err(Error::Dataset(format!(
                "image/mask size mismatch for {}",
                item.stem
            )));
        }
        Ok((image, mask))
    }
}

#[cfg(feature = "real-data")]
fn load_mask_png(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Dataset(format!("unreadable mask {}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        img.get_pixel(j as u32, i as u32).0[0]
    }))
}

#[cfg(feature = "real-data")]
fn load_image_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Dataset(format!("unreadable image {}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn(
        (h as usize, w as usize, 3),
        |(i, j, c)| img.get_pixel(j as u32, i as u32).0[c] as f64 / 255.0,
    ))
}

/// Materialize `count` synthetic samples into the real-dataset layout so the
/// ingest path can be exercised end to end.
#[cfg(feature = "real-data")]
pub fn materialize(source: &SyntheticSource, count: usize, out_dir: &Path) -> Result<()> {
    let images_dir = out_dir.join("images");
    let masks_dir = out_dir.join("masks");
    std::fs::create_dir_all(&images_dir)?;
    std::fs::create_dir_all(&masks_dir)?;
    let n = source.spec.image_size as u32;
    for index in 0..count {
        let (image, mask) = source.load(index);
        let mut rgb = image::RgbImage::new(n, n);
        for i in 0..n {
            for j in 0..n {
                let px = [
                    (image[[i as usize, j as usize, 0]] * 255.0).round() as u8,
                    (image[[i as usize, j as usize, 1]] * 255.0).round() as u8,
                    (image[[i as usize, j as usize, 2]] * 255.0).round() as u8,
                ];
                rgb.put_pixel(j, i, image::Rgb(px));
            }
        }
        let mut m = image::GrayImage::new(n, n);
        for i in 0..n {
            for j in 0..n {
                m.put_pixel(j, i, image::Luma([mask[[i as usize, j as usize]]]));
            }
        }
        let stem = format!("{index:06}");
        rgb.save(images_dir.join(format!("{stem}.png")))
            .map_err(|e| Error::Dataset(format!("cannot write image {stem}: {e}")))?;
        m.save(masks_dir.join(format!("{stem}.png")))
            .map_err(|e| Error::Dataset(format!("cannot write mask {stem}: {e}")))?;
    }
    Ok(())
}

/// The two episode sources behind one sampling interface.
pub enum DataSource {
    Synthetic(SyntheticSource),
    #[cfg(feature = "real-data")]
    Real(RealSource),
}

impl DataSource {
    pub fn pool(&self, class_id: u32) -> &[usize] {
        match self {
            DataSource::Synthetic(s) => s.pool(class_id),
            #[cfg(feature = "real-data")]
            DataSource::Real(r) => r.pool(class_id),
        }
    }

    pub fn image_size(&self) -> usize {
        match self {
            DataSource::Synthetic(s) => s.spec.image_size,
            #[cfg(feature = "real-data")]
            DataSource::Real(r) => r.image_size,
        }
    }

    fn load(&self, index: usize) -> Result<(Array3<f64>, Array2<u8>)> {
        match self {
            DataSource::Synthetic(s) => Ok(s.load(index)),
            #[cfg(feature = "real-data")]
            DataSource::Real(r) => r.load(index),
        }
    }
}

/// Binary episode mask for one class, plus the valid mask when ignore labels
/// are present.
fn episode_member(
    image: Array3<f64>,
    class_mask: &Array2<u8>,
    class_id: u32,
    flip: bool,
) -> Annotated {
    let fg = class_mask.mapv(|v| if v as u32 == class_id { 1.0 } else { 0.0 });
    let has_ignore = class_mask.iter().any(|&v| v == IGNORE_LABEL);
    let valid = has_ignore.then(|| {
        Mask::hard(class_mask.mapv(|v| if v == IGNORE_LABEL { 0.0 } else { 1.0 }))
            .expect("valid mask is binary")
    });
    let mut member = Annotated::new(image, Mask::hard(fg).expect("class mask is binary"));
    member.valid = valid;
    if flip {
        member = flip_horizontal(member);
    }
    member
}

fn flip_horizontal(mut a: Annotated) -> Annotated {
    a.image.invert_axis(ndarray::Axis(1));
    a.mask.data.invert_axis(ndarray::Axis(1));
    if let Some(v) = &mut a.valid {
        v.data.invert_axis(ndarray::Axis(1));
    }
    Annotated {
        image: a.image,
        mask: a.mask,
        valid: a.valid,
    }
}

/// Episode sampling options.
#[derive(Debug, Clone, Copy)]
pub struct SampleOptions {
    /// Resample until every member's mask survives alignment to this grid.
    pub align_to: Option<(usize, usize)>,
    /// Random horizontal flip per member (training augmentation).
    pub flip: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            align_to: None,
            flip: false,
        }
    }
}

/// Draw one K-shot episode: K supports plus a query sharing a class from the
/// split's class set, query distinct from every support.
pub fn sample_episode(
    source: &DataSource,
    fold: &FoldSpec,
    k: usize,
    rng: &mut ChaCha8Rng,
    options: &SampleOptions,
) -> Result<Episode> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let eligible: Vec<u32> = fold
        .active_classes()
        .into_iter()
        .filter(|&c| source.pool(c).len() >= k + 1)
        .collect();
    if eligible.is_empty() {
        return Err(Error::InsufficientSamples { k });
    }

    let max_attempts = 64 * (k + 1);
    for _ in 0..max_attempts {
        let class_id = *eligible.choose(rng).expect("non-empty");
        let pool = source.pool(class_id);
        let picks = rand::seq::index::sample(rng, pool.len(), k + 1);
        let mut members = Vec::with_capacity(k + 1);
        let mut ok = true;
        for pick in picks.iter() {
            let (image, mask) = source.load(pool[pick])?;
            let flip = options.flip && rng.random::<f64>() < 0.5;
            let member = episode_member(image, &mask, class_id, flip);
            if member.mask.active_count() == 0 {
                ok = false;
                break;
            }
            if let Some((h, w)) = options.align_to {
                let aligned = align_mask(&member.mask, h, w)?;
                if aligned.active_count() == 0 {
                    ok = false;
                    break;
                }
            }
            members.push(member);
        }
        if !ok {
            continue;
        }
        let query = members.pop().expect("k + 1 members");
        return Episode::new(members, query, class_id);
    }
    Err(Error::Dataset(format!(
        "could not assemble an episode after {max_attempts} attempts; \
         shapes may be too small for the alignment grid"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn source() -> SyntheticSource {
        SyntheticSource::new(SyntheticSpec {
            pool_size: 256,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn folds_partition_classes() {
        for fold_index in 0..4 {
            let fold = FoldSpec::new(8, 4, fold_index, Split::TrainOnBase).unwrap();
            let novel = fold.novel_classes();
            let base = fold.base_classes();
            assert_eq!(novel.len(), 2);
            assert_eq!(base.len(), 6);
            let mut all: Vec<u32> = novel.iter().chain(base.iter()).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (1..=8).collect::<Vec<_>>());
            assert!(novel.iter().all(|c| !base.contains(c)));
        }
    }

    #[test]
    fn folds_handle_non_divisible_class_counts() {
        let mut seen = Vec::new();
        for fold_index in 0..4 {
            let fold = FoldSpec::new(10, 4, fold_index, Split::EvalOnNovel).unwrap();
            seen.extend(fold.novel_classes());
        }
        seen.sort_unstable();
        assert_eq!(seen, (1..=10).collect::<Vec<_>>());
    }

    #[test]
    fn synthetic_samples_are_deterministic() {
        let a = source();
        let b = source();
        let (img_a, mask_a) = a.load(17);
        let (img_b, mask_b) = b.load(17);
        assert_eq!(mask_a, mask_b);
        assert_eq!(img_a, img_b);
        let c = SyntheticSource::new(SyntheticSpec {
            seed: 1,
            pool_size: 256,
            ..SyntheticSpec::default()
        })
        .unwrap();
        assert_ne!(c.load(17).1, mask_a);
    }

    #[test]
    fn synthetic_masks_are_nonempty_for_pooled_classes() {
        let s = source();
        for class in 1..=8u32 {
            let pool = s.pool(class);
            assert!(!pool.is_empty(), "class {class} pool empty");
            let (_, mask) = s.load(pool[0]);
            assert!(mask.iter().any(|&v| v as u32 == class));
        }
    }

    #[test]
    fn episode_members_share_class_and_are_distinct() {
        let s = DataSource::Synthetic(source());
        let fold = FoldSpec::new(8, 4, 0, Split::TrainOnBase).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ep = sample_episode(&s, &fold, 1, &mut rng, &SampleOptions::default()).unwrap();
        assert_eq!(ep.k(), 1);
        assert!(ep.query.mask.active_count() > 0);
        assert_ne!(ep.query.image, ep.supports[0].image);
    }

    #[test]
    fn five_shot_episode_has_five_distinct_supports() {
        let s = DataSource::Synthetic(source());
        let fold = FoldSpec::new(8, 4, 1, Split::TrainOnBase).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ep = sample_episode(&s, &fold, 5, &mut rng, &SampleOptions::default()).unwrap();
        assert_eq!(ep.k(), 5);
        for i in 0..5 {
            for j in (i + 1)..5 {
                assert_ne!(ep.supports[i].image, ep.supports[j].image);
            }
        }
    }

    #[test]
    fn train_split_never_emits_novel_classes() {
        let s = DataSource::Synthetic(source());
        let fold = FoldSpec::new(8, 4, 0, Split::TrainOnBase).unwrap();
        let novel = fold.novel_classes();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // The acceptance suite runs the full 10k-episode sweep; this is the
        // fast sanity version.
        for _ in 0..300 {
            let ep = sample_episode(&s, &fold, 1, &mut rng, &SampleOptions::default()).unwrap();
            assert!(!novel.contains(&ep.class_id));
        }
    }

    #[test]
    fn eval_split_emits_only_novel_classes() {
        let s = DataSource::Synthetic(source());
        let fold = FoldSpec::new(8, 4, 2, Split::EvalOnNovel).unwrap();
        let novel = fold.novel_classes();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let ep = sample_episode(&s, &fold, 1, &mut rng, &SampleOptions::default()).unwrap();
            assert!(novel.contains(&ep.class_id));
        }
    }

    #[test]
    fn aligned_resampling_guarantees_surviving_masks() {
        let s = DataSource::Synthetic(source());
        let fold = FoldSpec::new(8, 4, 0, Split::TrainOnBase).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let options = SampleOptions {
            align_to: Some((8, 8)),
            flip: false,
        };
        for _ in 0..50 {
            let ep = sample_episode(&s, &fold, 1, &mut rng, &options).unwrap();
            for member in ep.supports.iter().chain([&ep.query]) {
                let aligned = align_mask(&member.mask, 8, 8).unwrap();
                assert!(aligned.active_count() > 0);
            }
        }
    }

    #[test]
    fn fixed_seed_reproduces_episode_stream() {
        let s = DataSource::Synthetic(source());
        let fold = FoldSpec::new(8, 4, 0, Split::EvalOnNovel).unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..10)
                .map(|_| {
                    sample_episode(&s, &fold, 1, &mut rng, &SampleOptions::default())
                        .unwrap()
                        .class_id
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(3), run(3));
    }

    #[test]
    fn insufficient_samples_is_typed_error() {
        let s = DataSource::Synthetic(
            SyntheticSource::new(SyntheticSpec {
                pool_size: 2,
                ..SyntheticSpec::default()
            })
            .unwrap(),
        );
        let fold = FoldSpec::new(8, 4, 0, Split::TrainOnBase).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = sample_episode(&s, &fold, 5, &mut rng, &SampleOptions::default());
        assert!(matches!(err, Err(Error::InsufficientSamples { k: 5 })));
    }

    #[test]
    fn flip_augmentation_mirrors_mask_with_image() {
        let s = source();
        let (image, mask) = s.load(0);
        let class = *s
            .pools
            .iter()
            .find(|(_, v)| v.contains(&0))
            .map(|(c, _)| c)
            .unwrap();
        let plain = episode_member(image.clone(), &mask, class, false);
        let flipped = episode_member(image, &mask, class, true);
        let (h, w) = plain.mask.data.dim();
        for i in 0..h {
            for j in 0..w {
                assert_eq!(plain.mask.data[[i, j]], flipped.mask.data[[i, w - 1 - j]]);
                assert_eq!(plain.image[[i, j, 0]], flipped.image[[i, w - 1 - j, 0]]);
            }
        }
    }

    #[cfg(feature = "real-data")]
    #[test]
    fn materialize_and_ingest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = SyntheticSource::new(SyntheticSpec {
            pool_size: 8,
            ..SyntheticSpec::default()
        })
        .unwrap();
        materialize(&s, 6, dir.path()).unwrap();
        let real = RealSource::ingest(dir.path()).unwrap();
        assert_eq!(real.items.len(), 6);
        // Masks survive the PNG round trip exactly.
        let (_, direct) = s.load(3);
        let (_, ingested) = real.load(3).unwrap();
        assert_eq!(direct, ingested);
        // Images survive up to 8-bit quantization.
        let (img_direct, _) = s.load(3);
        let (img_ingested, _) = real.load(3).unwrap();
        let max_err = img_direct
            .iter()
            .zip(img_ingested.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err <= 0.5 / 255.0 + 1e-9);
    }

    #[cfg(feature = "real-data")]
    #[test]
    fn ingest_rejects_image_without_mask() {
        let dir = tempfile::tempdir().unwrap();
        let s = SyntheticSource::new(SyntheticSpec {
            pool_size: 4,
            ..SyntheticSpec::default()
        })
        .unwrap();
        materialize(&s, 3, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("masks/000001.png")).unwrap();
        let err = RealSource::ingest(dir.path()).unwrap_err();
        assert!(err.to_string().contains("000001"));
    }

    #[cfg(feature = "real-data")]
    #[test]
    fn mask_with_only_background_and_ignore_joins_no_pool() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        std::fs::create_dir_all(dir.path().join("masks")).unwrap();
        let img = image::RgbImage::new(16, 16);
        img.save(dir.path().join("images/a.png")).unwrap();
        let mut m = image::GrayImage::new(16, 16);
        for p in m.pixels_mut() {
            p.0[0] = IGNORE_LABEL;
        }
        m.put_pixel(0, 0, image::Luma([0]));
        m.save(dir.path().join("masks/a.png")).unwrap();
        let real = RealSource::ingest(dir.path()).unwrap();
        assert_eq!(real.items.len(), 1);
        for class in 1..=16 {
            assert!(real.pool(class).is_empty());
        }
    }
}
