//! Rank pooling: summarise a frame stack as the parameters of a linear
//! ranking function over the running means of the frames.

use serde::{Deserialize, Serialize};

use crate::datagen::FaceSequence;
use crate::error::{Error, Result};
use crate::views::{project, ImageKind, MultiviewSample, Resolution, ViewAngle, ViewImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankPoolMethod {
    Exact,
    Approximate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankPoolConfig {
    pub method: RankPoolMethod,
    pub lambda: f64,
    pub max_iters: usize,
    pub step_size: f64,
    pub tol: f64,
}

impl Default for RankPoolConfig {
    fn default() -> Self {
        RankPoolConfig {
            method: RankPoolMethod::Approximate,
            lambda: 1.0,
            max_iters: 500,
            step_size: 1e-2,
            tol: 1e-8,
        }
    }
}

impl RankPoolConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::invalid("rank pooling lambda must be > 0"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("rank pooling max_iters must be >= 1"));
        }
        if !(self.step_size > 0.0) || !(self.tol >= 0.0) {
            return Err(Error::invalid("rank pooling step_size must be > 0 and tol >= 0"));
        }
        Ok(())
    }
}

fn check_frames(frames: &[Vec<f64>]) -> Result<usize> {
    let dim = frames
        .first()
        .ok_or_else(|| Error::invalid("rank pooling needs at least one frame"))?
        .len();
    if let Some(bad) = frames.iter().find(|f| f.len() != dim) {
        return Err(Error::Shape {
            expected: format!("{dim} values per frame"),
            actual: format!("{}", bad.len()),
        });
    }
    Ok(dim)
}

/// `m_t = (1/t) * sum_{s<=t} v_s / |v_s|`; zero-norm frames contribute zero.
pub fn running_means(frames: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    check_frames(frames)?;
    Ok(cumulative_means(&unit_frames(frames)))
}

fn unit_frames(frames: &[Vec<f64>]) -> Vec<Vec<f64>> {
    frames
        .iter()
        .map(|f| {
            let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                f.iter().map(|v| v / norm).collect()
            } else {
                vec![0.0; f.len()]
            }
        })
        .collect()
}

fn cumulative_means(frames: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut acc = vec![0.0; frames[0].len()];
    let mut out = Vec::with_capacity(frames.len());
    for (t, frame) in frames.iter().enumerate() {
        for (a, v) in acc.iter_mut().zip(frame) {
            *a += v;
        }
        let inv = 1.0 / (t + 1) as f64;
        out.push(acc.iter().map(|a| a * inv).collect());
    }
    out
}

/// Pairwise ranking objective
/// `E(u) = lambda/2 |u|^2 + 2/(T(T-1)) * sum_{q>t} max(0, 1 - u.(m_q - m_t))`.
pub fn rank_objective(u: &[f64], means: &[Vec<f64>], lambda: f64) -> f64 {
    let t = means.len();
    let scores: Vec<f64> = means.iter().map(|m| dot(u, m)).collect();
    let mut hinge = 0.0;
    for q in 1..t {
        for s in 0..q {
            hinge += (1.0 - (scores[q] - scores[s])).max(0.0);
        }
    }
    0.5 * lambda * dot(u, u) + pair_weight(t) * hinge
}

fn pair_weight(t: usize) -> f64 {
    if t < 2 {
        0.0
    } else {
        2.0 / (t * (t - 1)) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankPoolSolution {
    pub u: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Objective after every accepted step, starting with `E(0)`.
    pub trace: Vec<f64>,
}

/// Full-batch subgradient descent on [`rank_objective`] from `u = 0`.
///
/// A step is accepted only if it strictly lowers the objective; otherwise the
/// step size is halved. Accepted steps double the step size (capped at
/// `1/lambda`, the exact minimiser step on the smooth part). The hinge
/// subgradient at the kink is 0. Stops when an accepted step changes the
/// objective by less than `tol`, when the step underflows, or at `max_iters`.
pub fn rank_pool_exact(frames: &[Vec<f64>], cfg: &RankPoolConfig) -> Result<RankPoolSolution> {
    cfg.validate()?;
    if frames.len() < 2 {
        return Err(Error::invalid(format!(
            "exact rank pooling needs T >= 2 frames, got {}",
            frames.len()
        )));
    }
    let means = running_means(frames)?;
    let dim = means[0].len();
    let t = means.len();
    let w = pair_weight(t);
    let lambda = cfg.lambda;
    let max_step = 1.0 / lambda;

    let mut u = vec![0.0; dim];
    let mut energy = rank_objective(&u, &means, lambda);
    let mut trace = vec![energy];
    let mut step = cfg.step_size.min(max_step);
    let mut grad = vec![0.0; dim];
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let scores: Vec<f64> = means.iter().map(|m| dot(&u, m)).collect();
        for (g, ui) in grad.iter_mut().zip(&u) {
            *g = lambda * ui;
        }
        for q in 1..t {
            for s in 0..q {
                if 1.0 - (scores[q] - scores[s]) > 0.0 {
                    for ((g, mq), ms) in grad.iter_mut().zip(&means[q]).zip(&means[s]) {
                        *g -= w * (mq - ms);
                    }
                }
            }
        }
        if grad.iter().all(|g| *g == 0.0) {
            break;
        }
        loop {
            let cand: Vec<f64> = u.iter().zip(&grad).map(|(ui, g)| ui - step * g).collect();
            let e = rank_objective(&cand, &means, lambda);
            if e < energy {
                let delta = energy - e;
                u = cand;
                energy = e;
                trace.push(e);
                step = (2.0 * step).min(max_step);
                if delta < cfg.tol {
                    return Ok(RankPoolSolution {
                        u,
                        objective: energy,
                        iterations,
                        trace,
                    });
                }
                break;
            }
            step *= 0.5;
            if step < 1e-18 {
                return Ok(RankPoolSolution {
                    u,
                    objective: energy,
                    iterations,
                    trace,
                });
            }
        }
    }
    Ok(RankPoolSolution {
        u,
        objective: energy,
        iterations,
        trace,
    })
}

/// Closed-form weights `alpha_t = 2t - T - 1` for `t = 1..=T`.
pub fn approx_coefficients(t: usize) -> Vec<f64> {
    (1..=t).map(|i| (2 * i) as f64 - t as f64 - 1.0).collect()
}

/// `u = sum_t alpha_t m_t`. A single frame pools to `m_1` by convention.
pub fn rank_pool_approx(frames: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_frames(frames)?;
    let units = unit_frames(frames);
    if units.len() == 1 {
        return Ok(units.into_iter().next().unwrap());
    }
    // The weights sum to zero, so shifting every frame by the first one
    // changes nothing mathematically; doing it before accumulation makes a
    // constant sequence pool to exactly zero instead of round-off.
    let shifted: Vec<Vec<f64>> = units
        .iter()
        .map(|u| u.iter().zip(&units[0]).map(|(a, b)| a - b).collect())
        .collect();
    let means = cumulative_means(&shifted);
    let coeffs = approx_coefficients(means.len());
    let mut u = vec![0.0; means[0].len()];
    for (c, m) in coeffs.iter().zip(&means) {
        for (ui, mi) in u.iter_mut().zip(m) {
            *ui += c * mi;
        }
    }
    Ok(u)
}

/// Pools with the configured method; `T = 1` returns `m_1` for either method.
pub fn rank_pool(frames: &[Vec<f64>], cfg: &RankPoolConfig) -> Result<Vec<f64>> {
    match (cfg.method, frames.len()) {
        (_, 0) => Err(Error::invalid("rank pooling needs at least one frame")),
        (_, 1) | (RankPoolMethod::Approximate, _) => rank_pool_approx(frames),
        (RankPoolMethod::Exact, _) => rank_pool_exact(frames, cfg).map(|s| s.u),
    }
}

/// Min-max normalises a pooled vector into `[0, 1]`. Vectors whose range is
/// negligible relative to `scale` (the magnitude of the pooled inputs) map to
/// all zeros rather than amplifying round-off.
pub fn normalize_dynamic(u: &[f64], scale: f64) -> Vec<f64> {
    let (lo, hi) = u
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    if !(span > 1e-9 * scale.max(f64::MIN_POSITIVE)) {
        return vec![0.0; u.len()];
    }
    u.iter().map(|v| (v - lo) / span).collect()
}

/// Rank-pools a stack of flattened frames and rescales the result to [0, 1].
pub fn dynamic_pixels(stack: &[Vec<f64>], cfg: &RankPoolConfig) -> Result<Vec<f64>> {
    let pooled = rank_pool(stack, cfg)?;
    let scale = running_means(stack)?
        .iter()
        .flat_map(|m| m.iter())
        .fold(0.0f64, |a, v| a.max(v.abs()));
    Ok(normalize_dynamic(&pooled, scale))
}

/// Renders every frame from each view and rank-pools each view independently.
pub fn dynamic_multiview(
    seq: &FaceSequence,
    cfg: &RankPoolConfig,
    res: Resolution,
    side_yaw_degrees: f64,
) -> Result<MultiviewSample> {
    if seq.frames.is_empty() {
        return Err(Error::invalid("sequence has no frames"));
    }
    let views = ViewAngle::triple(side_yaw_degrees).map(|view| -> Result<ViewImage> {
        let stack = seq
            .frames
            .iter()
            .map(|f| project(f, view, res).map(|img| img.pixels))
            .collect::<Result<Vec<_>>>()?;
        Ok(ViewImage {
            view,
            kind: ImageKind::Dynamic,
            height: res.height,
            width: res.width,
            pixels: dynamic_pixels(&stack, cfg)?,
        })
    });
    let [f, l, r] = views;
    Ok(MultiviewSample {
        views: [f?, l?, r?],
    })
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
