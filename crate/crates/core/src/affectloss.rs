//! Multiview contrastive + triplet objective with a learnable margin.
//!
//! ```text
//! L = Σ_pos (1 - Θ(z_i, z_j)) + Σ_neg max(0, Θ(z_k, z_l) - α)
//!   + Σ_trip max(0, ‖a - p‖² - ‖a - n‖² + α)
//! ```
//!
//! Terms are summed, not averaged. The margin `α` is shared by both hinge
//! families, so its gradient is `-(active negatives) + (active triplets)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::emotion::Emotion;
use crate::error::{Error, Result};
use crate::rng;

const TAG_TRIPLET: u64 = 0x7219;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityKind {
    #[default]
    Cosine,
    /// `-‖a - b‖`, so that larger still means more alike.
    NegativeEuclidean,
}

/// Where an embedding came from. Text prompts count as their own view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Frontal,
    Left,
    Right,
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub embedding: Vec<f64>,
    pub emotion: Emotion,
    pub modality: Modality,
    pub sample_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Index sets into the batch item list.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BatchPairs {
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
    pub triplets: Vec<Triplet>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mc_pos: f64,
    pub l_mc_neg: f64,
    pub l_mt: f64,
    pub total: f64,
    pub active_neg_pairs: usize,
    pub active_triplets: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    /// One gradient per batch item, same order as the input.
    pub embeddings: Vec<Vec<f64>>,
    pub alpha: f64,
}

/// Hinge used for both margin terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Hinge {
    Exact,
    /// `τ·ln(1 + e^{x/τ})`.
    Smooth(f64),
}

impl Hinge {
    /// `tau == 0` selects the exact hinge.
    pub fn from_tau(tau: f64) -> Result<Hinge> {
        if tau == 0.0 {
            Ok(Hinge::Exact)
        } else if tau > 0.0 && tau.is_finite() {
            Ok(Hinge::Smooth(tau))
        } else {
            Err(Error::invalid(format!("temperature must be > 0, got {tau}")))
        }
    }

    /// Value and derivative at `x`. The exact hinge has derivative 0 at the kink.
    fn eval(self, x: f64) -> (f64, f64) {
        match self {
            Hinge::Exact => {
                if x > 0.0 {
                    (x, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
            Hinge::Smooth(tau) => {
                let s = x / tau;
                let value = x.max(0.0) + tau * (-s.abs()).exp().ln_1p();
                let sigma = if s >= 0.0 {
                    1.0 / (1.0 + (-s).exp())
                } else {
                    let e = s.exp();
                    e / (1.0 + e)
                };
                (value, sigma)
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn similarity(a: &[f64], b: &[f64], kind: SimilarityKind) -> f64 {
    match kind {
        SimilarityKind::Cosine => dot(a, b),
        SimilarityKind::NegativeEuclidean => -sq_dist(a, b).sqrt(),
    }
}

/// Gradients of `Θ(a, b)` with respect to `a` and `b`.
fn similarity_grad(a: &[f64], b: &[f64], kind: SimilarityKind) -> (Vec<f64>, Vec<f64>) {
    match kind {
        SimilarityKind::Cosine => (b.to_vec(), a.to_vec()),
        SimilarityKind::NegativeEuclidean => {
            let d = sq_dist(a, b).sqrt();
            if d == 0.0 {
                return (vec![0.0; a.len()], vec![0.0; a.len()]);
            }
            let ga: Vec<f64> = a.iter().zip(b).map(|(x, y)| -(x - y) / d).collect();
            let gb = ga.iter().map(|v| -v).collect();
            (ga, gb)
        }
    }
}

/// Builds positive pairs (same emotion, different view), negative pairs
/// (different emotion) and one triplet per sample anchored on its frontal
/// view. Triplet partners are drawn from streams keyed by `seed` and the
/// sample id, so the result does not depend on item order within a sample.
pub fn mine_pairs(items: &[BatchItem], seed: u64) -> Result<BatchPairs> {
    let first = match items.first() {
        Some(it) => it.emotion,
        None => return Err(Error::Protocol("empty batch".into())),
    };
    if items.iter().all(|it| it.emotion == first) {
        return Err(Error::Protocol(
            "batch holds a single emotion; the batch sampler must mix at least two".into(),
        ));
    }
    let mut pairs = BatchPairs::default();
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            let (a, b) = (&items[i], &items[j]);
            if a.emotion != b.emotion {
                pairs.negatives.push((i, j));
            } else if a.modality != b.modality {
                pairs.positives.push((i, j));
            }
        }
    }
    let mut samples: Vec<usize> = items.iter().map(|it| it.sample_id).collect();
    samples.sort_unstable();
    samples.dedup();
    for sid in samples {
        let anchor = match items
            .iter()
            .position(|it| it.sample_id == sid && it.modality == Modality::Frontal)
        {
            Some(a) => a,
            None => continue,
        };
        let emotion = items[anchor].emotion;
        let pos: Vec<usize> = (0..items.len())
            .filter(|&k| items[k].emotion == emotion && items[k].modality != Modality::Frontal)
            .collect();
        let neg: Vec<usize> = (0..items.len()).filter(|&k| items[k].emotion != emotion).collect();
        if pos.is_empty() {
            continue;
        }
        let mut r = rng::stream(&[seed, TAG_TRIPLET, sid as u64]);
        let positive = pos[r.gen_range(0..pos.len())];
        let negative = neg[r.gen_range(0..neg.len())];
        pairs.triplets.push(Triplet {
            anchor,
            positive,
            negative,
        });
    }
    Ok(pairs)
}

fn check_indices(n: usize, pairs: &BatchPairs) -> Result<()> {
    let max = pairs
        .positives
        .iter()
        .chain(&pairs.negatives)
        .flat_map(|&(i, j)| [i, j])
        .chain(pairs.triplets.iter().flat_map(|t| [t.anchor, t.positive, t.negative]))
        .max();
    match max {
        Some(m) if m >= n => Err(Error::invalid(format!(
            "pair index {m} out of range for {n} embeddings"
        ))),
        _ => Ok(()),
    }
}

fn evaluate(
    emb: &[&[f64]],
    pairs: &BatchPairs,
    alpha: f64,
    kind: SimilarityKind,
    hinge: Hinge,
    mut grads: Option<&mut LossGradients>,
) -> LossBreakdown {
    let mut out = LossBreakdown::default();
    for &(i, j) in &pairs.positives {
        out.l_mc_pos += 1.0 - similarity(emb[i], emb[j], kind);
        if let Some(g) = grads.as_deref_mut() {
            let (gi, gj) = similarity_grad(emb[i], emb[j], kind);
            axpy(&mut g.embeddings[i], -1.0, &gi);
            axpy(&mut g.embeddings[j], -1.0, &gj);
        }
    }
    for &(k, l) in &pairs.negatives {
        let x = similarity(emb[k], emb[l], kind) - alpha;
        let (v, d) = hinge.eval(x);
        out.l_mc_neg += v;
        if x > 0.0 {
            out.active_neg_pairs += 1;
        }
        if let Some(g) = grads.as_deref_mut() {
            if d != 0.0 {
                let (gk, gl) = similarity_grad(emb[k], emb[l], kind);
                axpy(&mut g.embeddings[k], d, &gk);
                axpy(&mut g.embeddings[l], d, &gl);
                g.alpha -= d;
            }
        }
    }
    for t in &pairs.triplets {
        let (a, p, n) = (emb[t.anchor], emb[t.positive], emb[t.negative]);
        let x = sq_dist(a, p) - sq_dist(a, n) + alpha;
        let (v, d) = hinge.eval(x);
        out.l_mt += v;
        if x > 0.0 {
            out.active_triplets += 1;
        }
        if let Some(g) = grads.as_deref_mut() {
            if d != 0.0 {
                for c in 0..a.len() {
                    g.embeddings[t.anchor][c] += d * 2.0 * (n[c] - p[c]);
                    g.embeddings[t.positive][c] -= d * 2.0 * (a[c] - p[c]);
                    g.embeddings[t.negative][c] += d * 2.0 * (a[c] - n[c]);
                }
                g.alpha += d;
            }
        }
    }
    out.total = out.l_mc_pos + out.l_mc_neg + out.l_mt;
    out
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn views<T: AsRef<[f64]>>(emb: &[T]) -> Vec<&[f64]> {
    emb.iter().map(|e| e.as_ref()).collect()
}

pub fn loss_forward<T: AsRef<[f64]>>(
    emb: &[T],
    pairs: &BatchPairs,
    alpha: f64,
    kind: SimilarityKind,
) -> Result<LossBreakdown> {
    check_indices(emb.len(), pairs)?;
    Ok(evaluate(&views(emb), pairs, alpha, kind, Hinge::Exact, None))
}

/// Loss and its gradient with respect to every embedding and to `α`.
pub fn loss_backward<T: AsRef<[f64]>>(
    emb: &[T],
    pairs: &BatchPairs,
    alpha: f64,
    kind: SimilarityKind,
    hinge: Hinge,
) -> Result<(LossBreakdown, LossGradients)> {
    check_indices(emb.len(), pairs)?;
    let e = views(emb);
    let mut g = LossGradients {
        embeddings: e.iter().map(|v| vec![0.0; v.len()]).collect(),
        alpha: 0.0,
    };
    let out = evaluate(&e, pairs, alpha, kind, hinge, Some(&mut g));
    Ok((out, g))
}

/// Forward pass with both hinges replaced by a softplus of temperature `tau`.
pub fn smooth_variant<T: AsRef<[f64]>>(
    emb: &[T],
    pairs: &BatchPairs,
    alpha: f64,
    tau: f64,
    kind: SimilarityKind,
) -> Result<LossBreakdown> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("temperature must be > 0, got {tau}")));
    }
    check_indices(emb.len(), pairs)?;
    Ok(evaluate(&views(emb), pairs, alpha, kind, Hinge::Smooth(tau), None))
}

/// The triplet term computed from cosine similarities through
/// `‖a - b‖² = 2 - 2·a·b`, valid for unit vectors only.
pub fn triplet_term_via_similarity<T: AsRef<[f64]>>(emb: &[T], pairs: &BatchPairs, alpha: f64) -> f64 {
    let e = views(emb);
    pairs
        .triplets
        .iter()
        .map(|t| {
            let ap = 2.0 - 2.0 * dot(e[t.anchor], e[t.positive]);
            let an = 2.0 - 2.0 * dot(e[t.anchor], e[t.negative]);
            (ap - an + alpha).max(0.0)
        })
        .sum()
}
