use super::dense::{tanh_backward, tanh_in_place};
use super::{normalize_backward, Embedding, GradAccumulator, ModelParams};
use crate::error::{Error, Result};
use crate::prompts::{TokenSeq, VOCAB_SIZE};

#[derive(Debug, Clone)]
pub struct TextCache {
    tokens: Vec<u32>,
    pooled: Vec<f64>,
    a1: Vec<f64>,
    out: Vec<f64>,
    norm: f64,
}

/// Embedding lookup, mean over tokens, tanh layer, linear layer to the
/// shared dimension, L2 normalisation.
pub fn forward(tokens: &TokenSeq, params: &ModelParams) -> Result<(Embedding, TextCache)> {
    if tokens.is_empty() {
        return Err(Error::invalid("cannot encode an empty token sequence"));
    }
    if let Some(bad) = tokens.ids().iter().find(|&&t| t as usize >= VOCAB_SIZE) {
        return Err(Error::invalid(format!("token id {bad} outside vocabulary")));
    }
    let width = params.config.text_width;
    let table = params.tensor("txt.embed")?;
    let mut pooled = vec![0.0; width];
    for &t in tokens.ids() {
        let row = &table[t as usize * width..(t as usize + 1) * width];
        for (p, r) in pooled.iter_mut().zip(row) {
            *p += r;
        }
    }
    let inv = 1.0 / tokens.len() as f64;
    pooled.iter_mut().for_each(|p| *p *= inv);
    let v = &params.values;
    let mut a1 = params.dense("txt.l1").forward(v, &pooled);
    tanh_in_place(&mut a1);
    let z = params.dense("txt.l2").forward(v, &a1);
    let (emb, norm) = Embedding::normalize(&z);
    let cache = TextCache {
        tokens: tokens.ids().to_vec(),
        pooled,
        a1,
        out: emb.0.clone(),
        norm,
    };
    Ok((emb, cache))
}

pub fn backward(
    cache: &TextCache,
    grad: &[f64],
    params: &ModelParams,
    acc: &mut GradAccumulator,
) -> Result<()> {
    let v = &params.values;
    let gz = normalize_backward(&cache.out, cache.norm, grad);
    let ga1 = params.dense("txt.l2").backward(v, &mut acc.values, &cache.a1, &gz);
    let gp1 = tanh_backward(&cache.a1, &ga1);
    let gpooled = params.dense("txt.l1").backward(v, &mut acc.values, &cache.pooled, &gp1);
    let spec = params.spec("txt.embed")?;
    let width = params.config.text_width;
    let inv = 1.0 / cache.tokens.len() as f64;
    for &t in &cache.tokens {
        let start = spec.offset + t as usize * width;
        for (gv, gp) in acc.values[start..start + width].iter_mut().zip(&gpooled) {
            *gv += gp * inv;
        }
    }
    Ok(())
}
