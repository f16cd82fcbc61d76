//! Zero-shot classification by prompt matching.
//!
//! Each class is represented by the renormalised mean of its prompt-set text
//! embeddings. An input's view embeddings are averaged and renormalised, and
//! the cosine scores against the six class vectors go through a softmax with a
//! fixed temperature.

use serde::{Deserialize, Serialize};

use crate::dynimg::{dynamic_pixels, RankPoolConfig};
use crate::emotion::{Emotion, NUM_EMOTIONS};
use crate::encoders::{encode_image, encode_text, Embedding, ModelParams};
use crate::error::{Error, Result};
use crate::prompts::{class_prompt_set, tokenize};
use crate::views::{ImageKind, ViewImage};

pub const INFER_TEMPERATURE: f64 = 0.07;

/// Per-emotion probabilities, serialized in class order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Probabilities {
    pub happy: f64,
    pub sad: f64,
    pub angry: f64,
    pub disgust: f64,
    pub fear: f64,
    pub surprise: f64,
}

impl Probabilities {
    pub fn from_array(p: [f64; NUM_EMOTIONS]) -> Self {
        Probabilities {
            happy: p[0],
            sad: p[1],
            angry: p[2],
            disgust: p[3],
            fear: p[4],
            surprise: p[5],
        }
    }

    pub fn to_array(&self) -> [f64; NUM_EMOTIONS] {
        [self.happy, self.sad, self.angry, self.disgust, self.fear, self.surprise]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub probabilities: Probabilities,
    pub predicted: Emotion,
    /// Label each view would get on its own, in input order.
    pub per_view_agreement: Vec<Emotion>,
}

/// Numerically stable softmax of `scores / temperature`.
pub fn softmax(scores: &[f64; NUM_EMOTIONS], temperature: f64) -> [f64; NUM_EMOTIONS] {
    let max = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut p = scores.map(|s| ((s - max) / temperature).exp());
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    p
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct Classifier {
    params: ModelParams,
    class_text: Vec<Embedding>,
}

impl Classifier {
    /// Builds class vectors from the `n_per_class` class prompt sets.
    pub fn new(params: ModelParams, n_per_class: usize, prompt_seed: u64) -> Result<Classifier> {
        if n_per_class == 0 {
            return Err(Error::invalid("prompts per class must be >= 1"));
        }
        let sets: Vec<Vec<String>> = Emotion::ALL
            .iter()
            .map(|&e| class_prompt_set(e, n_per_class, prompt_seed))
            .collect();
        Classifier::from_prompt_sets(params, &sets)
    }

    pub fn from_prompt_sets(params: ModelParams, sets: &[Vec<String>]) -> Result<Classifier> {
        if sets.len() != NUM_EMOTIONS || sets.iter().any(Vec::is_empty) {
            return Err(Error::invalid("need a non-empty prompt set for each of the six emotions"));
        }
        let class_text = sets
            .iter()
            .map(|set| {
                let embs = set
                    .iter()
                    .map(|p| encode_text(&tokenize(p)?, &params))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Embedding::fuse(&embs))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Classifier { params, class_text })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn class_embeddings(&self) -> &[Embedding] {
        &self.class_text
    }

    pub fn scores(&self, image: &Embedding) -> [f64; NUM_EMOTIONS] {
        let mut s = [0.0; NUM_EMOTIONS];
        for (out, t) in s.iter_mut().zip(&self.class_text) {
            *out = image.0.iter().zip(&t.0).map(|(a, b)| a * b).sum();
        }
        s
    }

    /// Classifies one or more views of the same face.
    pub fn classify(&self, views: &[ViewImage]) -> Result<Classification> {
        if views.is_empty() {
            return Err(Error::invalid("at least one view is required"));
        }
        let embs = views
            .iter()
            .map(|v| encode_image(v, &self.params))
            .collect::<Result<Vec<_>>>()?;
        let per_view_agreement = embs
            .iter()
            .map(|e| Emotion::ALL[argmax(&self.scores(e))])
            .collect();
        let fused = Embedding::fuse(&embs);
        let p = softmax(&self.scores(&fused), INFER_TEMPERATURE);
        Ok(Classification {
            probabilities: Probabilities::from_array(p),
            predicted: Emotion::ALL[argmax(&p)],
            per_view_agreement,
        })
    }

    /// Rank-pools each view's frame sequence into a dynamic image first.
    pub fn classify_sequences(&self, sequences: &[Vec<ViewImage>], cfg: &RankPoolConfig) -> Result<Classification> {
        let views = sequences
            .iter()
            .map(|frames| pool_frames(frames, cfg))
            .collect::<Result<Vec<_>>>()?;
        self.classify(&views)
    }
}

/// Dynamic image of a sequence of same-size frames of one view.
pub fn pool_frames(frames: &[ViewImage], cfg: &RankPoolConfig) -> Result<ViewImage> {
    let first = frames
        .first()
        .ok_or_else(|| Error::invalid("a view sequence needs at least one frame"))?;
    if frames.iter().any(|f| f.height != first.height || f.width != first.width) {
        return Err(Error::invalid("all frames of a sequence must share one size"));
    }
    let stack: Vec<Vec<f64>> = frames.iter().map(|f| f.pixels.clone()).collect();
    Ok(ViewImage {
        view: first.view,
        kind: ImageKind::Dynamic,
        height: first.height,
        width: first.width,
        pixels: dynamic_pixels(&stack, cfg)?,
    })
}
