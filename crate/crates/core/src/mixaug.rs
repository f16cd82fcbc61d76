//! Mixed view augmentation: each view of a sample gets its own classical
//! transform (flip, rotation, crop, scale), drawn independently per sample.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::views::{ViewImage, ViewName};

pub const MAX_ROTATE_DEGREES: f64 = 15.0;
pub const CROP_RANGE: (f64, f64) = (0.8, 1.0);
pub const SCALE_RANGE: (f64, f64) = (0.9, 1.1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugKind {
    Identity,
    Hflip,
    Rotate,
    Crop,
    Scale,
}

impl AugKind {
    pub const ALL: [AugKind; 5] = [
        AugKind::Identity,
        AugKind::Hflip,
        AugKind::Rotate,
        AugKind::Crop,
        AugKind::Scale,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AugOp {
    Identity,
    Hflip,
    Rotate {
        degrees: f64,
    },
    /// Crop window of side `fraction` (relative), placed at `offset` within
    /// the remaining slack (0 = top/left, 1 = bottom/right).
    Crop {
        fraction: f64,
        offset_x: f64,
        offset_y: f64,
    },
    Scale {
        factor: f64,
    },
}

impl AugOp {
    pub fn kind(&self) -> AugKind {
        match self {
            AugOp::Identity => AugKind::Identity,
            AugOp::Hflip => AugKind::Hflip,
            AugOp::Rotate { .. } => AugKind::Rotate,
            AugOp::Crop { .. } => AugKind::Crop,
            AugOp::Scale { .. } => AugKind::Scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |v: f64, lo: f64, hi: f64| v.is_finite() && v >= lo && v <= hi;
        let ok = match *self {
            AugOp::Identity | AugOp::Hflip => true,
            AugOp::Rotate { degrees } => {
                in_range(degrees, -MAX_ROTATE_DEGREES, MAX_ROTATE_DEGREES)
            }
            AugOp::Crop {
                fraction,
                offset_x,
                offset_y,
            } => {
                in_range(fraction, CROP_RANGE.0, CROP_RANGE.1)
                    && in_range(offset_x, 0.0, 1.0)
                    && in_range(offset_y, 0.0, 1.0)
            }
            AugOp::Scale { factor } => in_range(factor, SCALE_RANGE.0, SCALE_RANGE.1),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("augmentation parameters out of range: {self:?}")))
        }
    }

    /// Uniform over kinds, then uniform over the kind's parameter ranges.
    pub fn sample<R: Rng>(rng: &mut R) -> AugOp {
        match AugKind::ALL[rng.gen_range(0..AugKind::ALL.len())] {
            AugKind::Identity => AugOp::Identity,
            AugKind::Hflip => AugOp::Hflip,
            AugKind::Rotate => AugOp::Rotate {
                degrees: rng.gen_range(-MAX_ROTATE_DEGREES..=MAX_ROTATE_DEGREES),
            },
            AugKind::Crop => AugOp::Crop {
                fraction: rng.gen_range(CROP_RANGE.0..=CROP_RANGE.1),
                offset_x: rng.gen_range(0.0..=1.0),
                offset_y: rng.gen_range(0.0..=1.0),
            },
            AugKind::Scale => AugOp::Scale {
                factor: rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1),
            },
        }
    }
}

/// Per-sample assignment of one op to each view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixedAugPlan {
    pub frontal: AugOp,
    pub left: AugOp,
    pub right: AugOp,
    pub seed: u64,
}

impl MixedAugPlan {
    pub fn identity() -> Self {
        MixedAugPlan {
            frontal: AugOp::Identity,
            left: AugOp::Identity,
            right: AugOp::Identity,
            seed: 0,
        }
    }

    pub fn op(&self, view: ViewName) -> AugOp {
        match view {
            ViewName::Frontal => self.frontal,
            ViewName::Left => self.left,
            ViewName::Right => self.right,
        }
    }
}

const TAG_PLAN: u64 = 0xA06;

/// Independent per-sample plans, keyed by (seed, epoch, sample index).
pub fn plan_epoch(n_samples: usize, seed: u64, epoch: u64) -> Vec<MixedAugPlan> {
    (0..n_samples as u64)
        .map(|i| {
            let sample_seed = rng::derive_seed(&[seed, TAG_PLAN, epoch, i]);
            let mut r = rng::stream(&[sample_seed]);
            MixedAugPlan {
                frontal: AugOp::sample(&mut r),
                left: AugOp::sample(&mut r),
                right: AugOp::sample(&mut r),
                seed: sample_seed,
            }
        })
        .collect()
}

/// Applies `op`, preserving dimensions. Geometric ops resample bilinearly
/// with zero fill outside the source support.
pub fn apply(img: &ViewImage, op: &AugOp) -> Result<ViewImage> {
    op.validate()?;
    let (h, w) = (img.height as f64, img.width as f64);
    let (cx, cy) = (w / 2.0, h / 2.0);
    match *op {
        AugOp::Identity => Ok(img.clone()),
        AugOp::Hflip => Ok(img.hflip()),
        AugOp::Rotate { degrees } => {
            // inverse map: rotate output coordinates by -degrees
            let (s, c) = (-degrees).to_radians().sin_cos();
            Ok(resample(img, |x, y| {
                let (dx, dy) = (x - cx, y - cy);
                (cx + c * dx - s * dy, cy + s * dx + c * dy)
            }))
        }
        AugOp::Crop {
            fraction,
            offset_x,
            offset_y,
        } => {
            let x0 = (1.0 - fraction) * w * offset_x;
            let y0 = (1.0 - fraction) * h * offset_y;
            Ok(resample(img, |x, y| (x0 + x * fraction, y0 + y * fraction)))
        }
        AugOp::Scale { factor } => {
            Ok(resample(img, |x, y| (cx + (x - cx) / factor, cy + (y - cy) / factor)))
        }
    }
}

/// Applies the plan's per-view ops to a (frontal, left, right) triple.
pub fn apply_plan(views: &[ViewImage; 3], plan: &MixedAugPlan) -> Result<[ViewImage; 3]> {
    let [f, l, r] = views;
    Ok([
        apply(f, &plan.frontal)?,
        apply(l, &plan.left)?,
        apply(r, &plan.right)?,
    ])
}

/// `map` takes an output pixel centre (continuous coordinates, pixel (0, 0)
/// spans [0, 1)^2) and returns the source location.
fn resample(img: &ViewImage, map: impl Fn(f64, f64) -> (f64, f64)) -> ViewImage {
    let (h, w) = (img.height, img.width);
    let mut out = img.clone();
    for row in 0..h {
        for col in 0..w {
            let (sx, sy) = map(col as f64 + 0.5, row as f64 + 0.5);
            out.pixels[row * w + col] = bilinear(img, sx - 0.5, sy - 0.5).clamp(0.0, 1.0);
        }
    }
    out
}

/// Bilinear sample at continuous index coordinates; out-of-range taps are 0.
fn bilinear(img: &ViewImage, x: f64, y: f64) -> f64 {
    let (h, w) = (img.height as isize, img.width as isize);
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let tap = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= h || c >= w {
            0.0
        } else {
            img.pixels[(r * w + c) as usize]
        }
    };
    (1.0 - fy) * ((1.0 - fx) * tap(y0, x0) + fx * tap(y0, x0 + 1))
        + fy * ((1.0 - fx) * tap(y0 + 1, x0) + fx * tap(y0 + 1, x0 + 1))
}
