//! Normalized bounding-box algebra for the crop MDP: relative-coordinate
//! actions between crops, their tokenization, IoU, and the random-resized-crop
//! sampler that induces the transition kernel.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of bins per action coordinate.
pub const ACTION_BINS: usize = 64;
/// Lower edge of the tokenization range.
pub const ACTION_RANGE_LO: f64 = -3.5;
/// Upper edge (exclusive) of the tokenization range.
pub const ACTION_RANGE_HI: f64 = 4.5;
/// Width of one tokenization bin.
pub const ACTION_BIN_WIDTH: f64 = (ACTION_RANGE_HI - ACTION_RANGE_LO) / ACTION_BINS as f64;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("degenerate box: extent must be positive, got {0:?}")]
    DegenerateBox(BBox),
    #[error("invalid sampler range: {0}")]
    InvalidRange(String),
}

/// Axis-aligned rectangle, coordinates normalized to the enclosing frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub y_min: f64,
    pub x_min: f64,
    pub y_max: f64,
    pub x_max: f64,
}

/// Coordinates of a target box expressed in a source box's frame.
/// Values outside [0, 1] encode zoom-out / panning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelAction {
    pub y_min: f64,
    pub x_min: f64,
    pub y_max: f64,
    pub x_max: f64,
}

/// Four bin indices, one per relative-action coordinate, each in [0, 64).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionTokens(pub [u16; 4]);

impl BBox {
    pub fn new(y_min: f64, x_min: f64, y_max: f64, x_max: f64) -> Self {
        BBox { y_min, x_min, y_max, x_max }
    }

    pub fn unit() -> Self {
        BBox::new(0.0, 0.0, 1.0, 1.0)
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn area(&self) -> f64 {
        self.height() * self.width()
    }

    pub fn is_valid(&self) -> bool {
        self.y_min < self.y_max && self.x_min < self.x_max
    }

    /// Clamp all coordinates into [0, 1].
    pub fn clip_unit(&self) -> BBox {
        BBox::new(
            self.y_min.clamp(0.0, 1.0),
            self.x_min.clamp(0.0, 1.0),
            self.y_max.clamp(0.0, 1.0),
            self.x_max.clamp(0.0, 1.0),
        )
    }
}

impl RelAction {
    pub fn new(y_min: f64, x_min: f64, y_max: f64, x_max: f64) -> Self {
        RelAction { y_min, x_min, y_max, x_max }
    }

    /// The self-action: applying it to any box reproduces the box.
    pub fn identity() -> Self {
        RelAction::new(0.0, 0.0, 1.0, 1.0)
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.y_min, self.x_min, self.y_max, self.x_max]
    }
}

/// Coordinates of `dst` in the frame spanned by `src`.
pub fn relative_bbox(src: &BBox, dst: &BBox) -> Result<RelAction, GeometryError> {
    let h = src.height();
    let w = src.width();
    if h <= 0.0 || w <= 0.0 {
        return Err(GeometryError::DegenerateBox(*src));
    }
    Ok(RelAction::new(
        (dst.y_min - src.y_min) / h,
        (dst.x_min - src.x_min) / w,
        (dst.y_max - src.y_min) / h,
        (dst.x_max - src.x_min) / w,
    ))
}

/// Inverse of [`relative_bbox`]: resolve a relative action in `src`'s frame.
/// Never clips; callers decide whether the result must stay in [0, 1].
pub fn apply_action(src: &BBox, a: &RelAction) -> Result<BBox, GeometryError> {
    let h = src.height();
    let w = src.width();
    if h <= 0.0 || w <= 0.0 {
        return Err(GeometryError::DegenerateBox(*src));
    }
    Ok(BBox::new(
        src.y_min + a.y_min * h,
        src.x_min + a.x_min * w,
        src.y_min + a.y_max * h,
        src.x_min + a.x_max * w,
    ))
}

/// Intersection-over-union of two boxes in a common frame.
pub fn iou(b1: &BBox, b2: &BBox) -> f64 {
    let iy = (b1.y_max.min(b2.y_max) - b1.y_min.max(b2.y_min)).max(0.0);
    let ix = (b1.x_max.min(b2.x_max) - b1.x_min.max(b2.x_min)).max(0.0);
    let inter = iy * ix;
    let union = b1.area() + b2.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn discretize_coord(v: f64) -> u16 {
    let clamped = v.clamp(ACTION_RANGE_LO, ACTION_RANGE_HI - ACTION_BIN_WIDTH * 1e-9);
    let bin = ((clamped - ACTION_RANGE_LO) / ACTION_BIN_WIDTH).floor() as i64;
    bin.clamp(0, ACTION_BINS as i64 - 1) as u16
}

/// Map each coordinate to one of 64 uniform bins over [-3.5, 4.5).
/// Out-of-range coordinates are clamped to the edge bins.
pub fn discretize_action(a: &RelAction) -> ActionTokens {
    let c = a.coords();
    ActionTokens([
        discretize_coord(c[0]),
        discretize_coord(c[1]),
        discretize_coord(c[2]),
        discretize_coord(c[3]),
    ])
}

/// Bin centers of the given tokens.
pub fn continuize(tokens: &ActionTokens) -> RelAction {
    let c: Vec<f64> = tokens
        .0
        .iter()
        .map(|&t| ACTION_RANGE_LO + (t as f64 + 0.5) * ACTION_BIN_WIDTH)
        .collect();
    RelAction::new(c[0], c[1], c[2], c[3])
}

/// Random-resized-crop sampler configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CropConfig {
    /// Area fraction range (min, max], both in (0, 1].
    pub scale: (f64, f64),
    /// Aspect ratio range (w/h), sampled log-uniformly.
    pub ratio: (f64, f64),
    /// Minimum crop side, as a fraction of the frame (degenerate-crop guard).
    pub min_side: f64,
}

impl CropConfig {
    pub fn new(scale_min: f64, scale_max: f64) -> Self {
        CropConfig {
            scale: (scale_min, scale_max),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
            min_side: 1.0 / 64.0,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let (smin, smax) = self.scale;
        if !(smin > 0.0 && smin <= smax && smax <= 1.0) {
            return Err(GeometryError::InvalidRange(format!(
                "scale range ({smin}, {smax}) must satisfy 0 < min <= max <= 1"
            )));
        }
        let (rmin, rmax) = self.ratio;
        if !(rmin > 0.0 && rmin <= rmax) {
            return Err(GeometryError::InvalidRange(format!(
                "ratio range ({rmin}, {rmax}) must be positive and ordered"
            )));
        }
        Ok(())
    }
}

/// Random-resized-crop semantics: area fraction uniform in the scale range,
/// aspect ratio log-uniform, position uniform among feasible placements.
/// Falls back to a center crop at `scale.0` after 10 infeasible draws.
pub fn sample_crop<R: Rng>(rng: &mut R, cfg: &CropConfig) -> Result<BBox, GeometryError> {
    cfg.validate()?;
    for _ in 0..10 {
        let area = rng.gen_range(cfg.scale.0..=cfg.scale.1);
        let log_r = rng.gen_range(cfg.ratio.0.ln()..=cfg.ratio.1.ln());
        let ratio = log_r.exp();
        let w = (area * ratio).sqrt();
        let h = (area / ratio).sqrt();
        if w < cfg.min_side || h < cfg.min_side || w > 1.0 || h > 1.0 {
            continue;
        }
        let y0 = rng.gen_range(0.0..=(1.0 - h));
        let x0 = rng.gen_range(0.0..=(1.0 - w));
        return Ok(BBox::new(y0, x0, y0 + h, x0 + w));
    }
    // Deterministic fallback: centered square at the minimum scale.
    let side = cfg.scale.0.sqrt().max(cfg.min_side).min(1.0);
    let off = (1.0 - side) / 2.0;
    Ok(BBox::new(off, off, off + side, off + side))
}
