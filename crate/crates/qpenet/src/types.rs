//! Shared semantic types and the shape/range contracts every other module
//! consumes. All layouts are row-major: feature maps are `[h, w, c]`, masks
//! are `[h, w]`, prototypes are `[c]`.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense activations at feature resolution, shape `[h, w, c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Array3<f64>,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::ShapeMismatch(format!(
                "feature map must be non-degenerate, got [{h}, {w}, {c}]"
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::ShapeMismatch(
                "feature map contains non-finite entries".into(),
            ));
        }
        Ok(Self { data })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskKind {
    /// Entries are exactly 0 or 1.
    Hard,
    /// Entries lie in `[0, 1]`.
    Soft,
}

/// Spatial mask over the same grid as the features it is paired with.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub data: Array2<f64>,
    pub kind: MaskKind,
}

impl Mask {
    pub fn hard(data: Array2<f64>) -> Result<Self> {
        if !data.iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(Error::ShapeMismatch(
                "hard mask entries must be exactly 0 or 1".into(),
            ));
        }
        Ok(Self {
            data,
            kind: MaskKind::Hard,
        })
    }

    pub fn soft(data: Array2<f64>) -> Result<Self> {
        if !data.iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(Error::ShapeMismatch(
                "soft mask entries must lie in [0, 1]".into(),
            ));
        }
        Ok(Self {
            data,
            kind: MaskKind::Soft,
        })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn is_hard(&self) -> bool {
        self.kind == MaskKind::Hard
    }

    /// Number of strictly positive entries.
    pub fn active_count(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.0).count()
    }

    /// Complement `1 - m`; only meaningful for hard masks.
    pub fn complement(&self) -> Mask {
        Mask {
            data: self.data.mapv(|v| 1.0 - v),
            kind: self.kind,
        }
    }
}

/// Which slot of the evolution pipeline a pooled vector fills.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrototypeRole {
    FgPre,
    FgPseudo,
    FgMain,
    FgAux,
    BgGlobal,
    BgCleansed,
}

/// A pooled per-class feature vector of length `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub data: Array1<f64>,
    pub role: PrototypeRole,
}

impl Prototype {
    pub fn new(data: Array1<f64>, role: PrototypeRole) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::ShapeMismatch("prototype must be non-empty".into()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::ShapeMismatch(
                "prototype contains non-finite entries".into(),
            ));
        }
        Ok(Self { data, role })
    }

    pub fn channels(&self) -> usize {
        self.data.len()
    }
}

/// One image with its binary episode mask. `valid` marks scored pixels
/// (ignore-labeled pixels are 0 there); `None` means everything counts.
#[derive(Debug, Clone)]
pub struct Annotated {
    pub image: Array3<f64>,
    pub mask: Mask,
    pub valid: Option<Mask>,
}

impl Annotated {
    pub fn new(image: Array3<f64>, mask: Mask) -> Self {
        Self {
            image,
            mask,
            valid: None,
        }
    }
}

/// One few-shot task: K annotated supports plus a query, all sharing a class.
#[derive(Debug, Clone)]
pub struct Episode {
    pub supports: Vec<Annotated>,
    pub query: Annotated,
    pub class_id: u32,
}

impl Episode {
    pub fn new(supports: Vec<Annotated>, query: Annotated, class_id: u32) -> Result<Self> {
        if supports.is_empty() {
            return Err(Error::InvalidConfig("episode needs at least one support".into()));
        }
        for s in &supports {
            if !s.mask.is_hard() {
                return Err(Error::InvalidConfig("support masks must be hard".into()));
            }
            if s.mask.active_count() == 0 {
                return Err(Error::EmptySupport);
            }
        }
        if !query.mask.is_hard() {
            return Err(Error::InvalidConfig("query mask must be hard".into()));
        }
        Ok(Self {
            supports,
            query,
            class_id,
        })
    }

    pub fn k(&self) -> usize {
        self.supports.len()
    }
}

/// Tile a prototype over an `h x w` grid: `out[i, j, :] = p`.
pub fn broadcast(p: &Prototype, h: usize, w: usize) -> Result<FeatureMap> {
    if h == 0 || w == 0 {
        return Err(Error::ShapeMismatch(format!(
            "broadcast target must be at least 1x1, got {h}x{w}"
        )));
    }
    let c = p.channels();
    let mut out = Array3::zeros((h, w, c));
    for i in 0..h {
        for j in 0..w {
            out.slice_mut(ndarray::s![i, j, ..]).assign(&p.data);
        }
    }
    FeatureMap::new(out)
}

/// Area-average a hard mask down to `h x w`, then binarize with a strict
/// `> 0.5` test. Cells whose average is exactly 0.5 come out background,
/// which keeps thin-object halves from inflating.
pub fn align_mask(m: &Mask, h: usize, w: usize) -> Result<Mask> {
    if !m.is_hard() {
        return Err(Error::InvalidConfig("align_mask expects a hard mask".into()));
    }
    if h == 0 || w == 0 {
        return Err(Error::ShapeMismatch(format!(
            "align target must be at least 1x1, got {h}x{w}"
        )));
    }
    let (src_h, src_w) = m.data.dim();
    if (src_h, src_w) == (h, w) {
        return Ok(m.clone());
    }
    let avg = area_average(&m.data, h, w);
    Mask::hard(avg.mapv(|v| if v > 0.5 { 1.0 } else { 0.0 }))
}

/// Exact box-overlap area averaging from `[src_h, src_w]` to `[h, w]`.
/// Handles non-divisible ratios by weighting partially covered pixels.
pub fn area_average(src: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let (src_h, src_w) = src.dim();
    let ry = src_h as f64 / h as f64;
    let rx = src_w as f64 / w as f64;
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        let y0 = i as f64 * ry;
        let y1 = (i + 1) as f64 * ry;
        for j in 0..w {
            let x0 = j as f64 * rx;
            let x1 = (j + 1) as f64 * rx;
            let mut acc = 0.0;
            let mut area = 0.0;
            let mut y = y0.floor() as usize;
            while (y as f64) < y1 && y < src_h {
                let wy = (y1.min((y + 1) as f64) - y0.max(y as f64)).max(0.0);
                if wy > 0.0 {
                    let mut x = x0.floor() as usize;
                    while (x as f64) < x1 && x < src_w {
                        let wx = (x1.min((x + 1) as f64) - x0.max(x as f64)).max(0.0);
                        if wx > 0.0 {
                            acc += src[[y, x]] * wy * wx;
                            area += wy * wx;
                        }
                        x += 1;
                    }
                }
                y += 1;
            }
            out[[i, j]] = if area > 0.0 { acc / area } else { 0.0 };
        }
    }
    out
}

/// Bilinear upsample of a soft map (half-pixel centers), used when lifting a
/// feature-resolution prediction back to image resolution.
pub fn upsample_bilinear(src: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let (src_h, src_w) = src.dim();
    if (src_h, src_w) == (h, w) {
        return src.clone();
    }
    let sy = src_h as f64 / h as f64;
    let sx = src_w as f64 / w as f64;
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (src_h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let ty = fy - y0 as f64;
        for j in 0..w {
            let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (src_w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let tx = fx - x0 as f64;
            let top = src[[y0, x0]] * (1.0 - tx) + src[[y0, x1]] * tx;
            let bot = src[[y1, x0]] * (1.0 - tx) + src[[y1, x1]] * tx;
            out[[i, j]] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}
