//! Image and text towers mapping views and prompts onto the unit sphere of a
//! shared embedding space, with exact reverse-mode gradients.

use std::fmt;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompts::{TokenSeq, VOCAB_SIZE};
use crate::rng;
use crate::views::{Resolution, ViewImage};

pub mod checkpoint;
mod dense;
mod image;
mod text;

pub use dense::Dense;

pub const DEFAULT_EMBED_DIM: usize = 64;
/// tiny-conv average-pools its last feature map onto this many cells per side.
pub const CONV_GRID: usize = 4;
/// Learnable margin bounds; the margin is clamped into this range after every
/// optimizer step.
pub const ALPHA_MIN: f64 = 0.05;
pub const ALPHA_MAX: f64 = 1.0;
pub const ALPHA_INIT: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Engine {
    #[serde(rename = "patch-mlp-16")]
    PatchMlp16,
    #[serde(rename = "patch-mlp-32")]
    PatchMlp32,
    #[serde(rename = "tiny-conv")]
    TinyConv,
}

impl Engine {
    pub const ALL: [Engine; 3] = [Engine::PatchMlp16, Engine::PatchMlp32, Engine::TinyConv];

    pub fn id(self) -> u32 {
        match self {
            Engine::PatchMlp16 => 0,
            Engine::PatchMlp32 => 1,
            Engine::TinyConv => 2,
        }
    }

    pub fn from_id(id: u32) -> Option<Engine> {
        Engine::ALL.into_iter().find(|e| e.id() == id)
    }

    pub fn name(self) -> &'static str {
        match self {
            Engine::PatchMlp16 => "patch-mlp-16",
            Engine::PatchMlp32 => "patch-mlp-32",
            Engine::TinyConv => "tiny-conv",
        }
    }

    pub fn patch_size(self) -> Option<usize> {
        match self {
            Engine::PatchMlp16 => Some(16),
            Engine::PatchMlp32 => Some(32),
            Engine::TinyConv => None,
        }
    }
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Engine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Engine> {
        Engine::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown engine '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub engine: Engine,
    pub embed_dim: usize,
    pub resolution: Resolution,
    /// Patch projection width (patch engines).
    pub patch_width: usize,
    /// Channels of the two stride-2 convolutions (tiny-conv).
    pub conv_channels: [usize; 2],
    /// Width of both tanh layers of the image head.
    pub hidden: usize,
    /// Token embedding width.
    pub text_width: usize,
    pub text_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            engine: Engine::PatchMlp16,
            embed_dim: DEFAULT_EMBED_DIM,
            resolution: Resolution::square(64),
            patch_width: 32,
            conv_channels: [8, 16],
            hidden: 64,
            text_width: 32,
            text_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.resolution.validate()?;
        let Resolution { height, width } = self.resolution;
        match self.engine.patch_size() {
            Some(p) if height % p != 0 || width % p != 0 => {
                return Err(Error::invalid(format!(
                    "{} needs a resolution divisible by {p}, got {height}x{width}",
                    self.engine
                )))
            }
            None if height % 16 != 0 || width % 16 != 0 => {
                return Err(Error::invalid(format!(
                    "tiny-conv needs a resolution divisible by 16, got {height}x{width}"
                )))
            }
            _ => {}
        }
        let dims = [
            self.embed_dim,
            self.patch_width,
            self.conv_channels[0],
            self.conv_channels[1],
            self.hidden,
            self.text_width,
            self.text_hidden,
        ];
        if dims.contains(&0) {
            return Err(Error::invalid("model dimensions must be >= 1"));
        }
        Ok(())
    }

    /// Tensor names, shapes and fan-ins in storage order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut t: Vec<(String, Vec<usize>, usize)> = Vec::new();
        fn dense(t: &mut Vec<(String, Vec<usize>, usize)>, name: &str, out: usize, inp: usize) {
            t.push((format!("{name}.w"), vec![out, inp], inp));
            t.push((format!("{name}.b"), vec![out], inp));
        }
        let feat = match self.engine.patch_size() {
            Some(p) => {
                dense(&mut t, "img.patch", self.patch_width, p * p);
                self.patch_width * (self.resolution.height / p) * (self.resolution.width / p)
            }
            None => {
                let [c1, c2] = self.conv_channels;
                dense(&mut t, "img.conv1", c1, 9);
                dense(&mut t, "img.conv2", c2, c1 * 9);
                c2 * CONV_GRID * CONV_GRID
            }
        };
        dense(&mut t, "img.l1", self.hidden, feat);
        dense(&mut t, "img.l2", self.hidden, self.hidden);
        dense(&mut t, "img.head", self.embed_dim, self.hidden);
        t.push(("txt.embed".into(), vec![VOCAB_SIZE, self.text_width], 1));
        dense(&mut t, "txt.l1", self.text_hidden, self.text_width);
        dense(&mut t, "txt.l2", self.embed_dim, self.text_hidden);
        t
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    pub fan_in: usize,
}

impl ParamSpec {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

pub fn build_layout(config: &ModelConfig) -> Vec<ParamSpec> {
    let mut offset = 0;
    config
        .tensor_shapes()
        .into_iter()
        .map(|(name, shape, fan_in)| {
            let len = shape.iter().product();
            let spec = ParamSpec {
                name,
                shape,
                offset,
                len,
                fan_in,
            };
            offset += len;
            spec
        })
        .collect()
}

/// All encoder weights in one flat buffer plus the learnable margin.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub layout: Vec<ParamSpec>,
    pub values: Vec<f64>,
    pub alpha: f64,
}

const TAG_INIT: u64 = 0x1417;

impl ModelParams {
    /// Uniform(-s, s) initialisation with s = 1/sqrt(fan_in).
    pub fn init(config: ModelConfig, seed: u64) -> Result<ModelParams> {
        config.validate()?;
        let layout = build_layout(&config);
        let total = layout.last().map_or(0, |s| s.offset + s.len);
        let mut values = Vec::with_capacity(total);
        for (i, spec) in layout.iter().enumerate() {
            let s = 1.0 / (spec.fan_in as f64).sqrt();
            let mut r = rng::stream(&[seed, TAG_INIT, i as u64]);
            values.extend((0..spec.len).map(|_| r.gen_range(-s..s)));
        }
        Ok(ModelParams {
            config,
            layout,
            values,
            alpha: ALPHA_INIT,
        })
    }

    pub fn zeros(config: ModelConfig) -> Result<ModelParams> {
        config.validate()?;
        let layout = build_layout(&config);
        let total = layout.last().map_or(0, |s| s.offset + s.len);
        Ok(ModelParams {
            config,
            layout,
            values: vec![0.0; total],
            alpha: ALPHA_INIT,
        })
    }

    pub fn num_values(&self) -> usize {
        self.values.len()
    }

    pub fn spec(&self, name: &str) -> Result<&ParamSpec> {
        self.layout
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Usage(format!("no parameter tensor named '{name}'")))
    }

    pub fn tensor(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.values[self.spec(name)?.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let r = self.spec(name)?.range();
        Ok(&mut self.values[r])
    }

    pub(crate) fn dense(&self, name: &str) -> Dense {
        let w = self.spec(&format!("{name}.w")).expect("dense weight in layout");
        let b = self.spec(&format!("{name}.b")).expect("dense bias in layout");
        Dense {
            w: w.range(),
            b: b.range(),
            out: w.shape[0],
            inp: w.shape[1],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.is_finite() && self.values.iter().all(|v| v.is_finite())
    }

    pub fn clamp_alpha(&mut self) {
        self.alpha = self.alpha.clamp(ALPHA_MIN, ALPHA_MAX);
    }

    pub fn zero_grad(&self) -> GradAccumulator {
        GradAccumulator {
            values: vec![0.0; self.values.len()],
            alpha: 0.0,
        }
    }
}

/// Gradient buffers aligned with [`ModelParams::values`] and `alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradAccumulator {
    pub values: Vec<f64>,
    pub alpha: f64,
}

impl GradAccumulator {
    pub fn zero(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
        self.alpha = 0.0;
    }

    pub fn scale(&mut self, k: f64) {
        self.values.iter_mut().for_each(|v| *v *= k);
        self.alpha *= k;
    }

    /// Flat view with alpha appended.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.values.len() + 1);
        v.extend_from_slice(&self.values);
        v.push(self.alpha);
        v
    }

    pub fn from_flat(flat: &[f64]) -> GradAccumulator {
        let (alpha, values) = flat.split_last().expect("flat gradient has alpha slot");
        GradAccumulator {
            values: values.to_vec(),
            alpha: *alpha,
        }
    }
}

/// Unit-norm vector in the shared space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// `z / |z|`, or the first basis vector when `z` is zero.
    pub fn normalize(z: &[f64]) -> (Embedding, f64) {
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            (Embedding(z.iter().map(|v| v / norm).collect()), norm)
        } else {
            let mut e = vec![0.0; z.len()];
            e[0] = 1.0;
            (Embedding(e), 0.0)
        }
    }

    /// Mean of several embeddings, renormalised.
    pub fn fuse(items: &[Embedding]) -> Embedding {
        let dim = items.first().map_or(0, Embedding::dim);
        let mut acc = vec![0.0; dim];
        for e in items {
            for (a, v) in acc.iter_mut().zip(&e.0) {
                *a += v;
            }
        }
        Embedding::normalize(&acc).0
    }
}

/// Backprop of `out = z/|z|`: `(I - out out^T) g / |z|`; zero when `|z| = 0`.
pub(crate) fn normalize_backward(out: &[f64], norm: f64, g: &[f64]) -> Vec<f64> {
    if norm == 0.0 {
        return vec![0.0; g.len()];
    }
    let proj: f64 = out.iter().zip(g).map(|(o, gi)| o * gi).sum();
    out.iter()
        .zip(g)
        .map(|(o, gi)| (gi - o * proj) / norm)
        .collect()
}

#[derive(Debug, Clone)]
pub enum ForwardCache {
    Image(image::ImageCache),
    Text(text::TextCache),
}

/// Records forward caches so gradients can be pulled back per embedding.
#[derive(Debug, Default)]
pub struct Tape {
    entries: Vec<Option<ForwardCache>>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn encode_image(&mut self, img: &ViewImage, params: &ModelParams) -> Result<(usize, Embedding)> {
        let (emb, cache) = image::forward(img, params)?;
        self.entries.push(Some(ForwardCache::Image(cache)));
        Ok((self.entries.len() - 1, emb))
    }

    pub fn encode_text(&mut self, tokens: &TokenSeq, params: &ModelParams) -> Result<(usize, Embedding)> {
        let (emb, cache) = text::forward(tokens, params)?;
        self.entries.push(Some(ForwardCache::Text(cache)));
        Ok((self.entries.len() - 1, emb))
    }

    /// Accumulates parameter gradients for `grad` (dL/d embedding) into
    /// `acc`. The cache is consumed.
    pub fn backward(
        &mut self,
        id: usize,
        grad: &[f64],
        params: &ModelParams,
        acc: &mut GradAccumulator,
    ) -> Result<()> {
        let cache = self
            .entries
            .get_mut(id)
            .and_then(Option::take)
            .ok_or_else(|| Error::Usage(format!("no cached forward pass for tape entry {id}")))?;
        backward(&cache, grad, params, acc)
    }
}

pub fn encode_image(img: &ViewImage, params: &ModelParams) -> Result<Embedding> {
    image::forward(img, params).map(|(e, _)| e)
}

pub fn encode_text(tokens: &TokenSeq, params: &ModelParams) -> Result<Embedding> {
    text::forward(tokens, params).map(|(e, _)| e)
}

pub fn encode_image_cached(img: &ViewImage, params: &ModelParams) -> Result<(Embedding, ForwardCache)> {
    image::forward(img, params).map(|(e, c)| (e, ForwardCache::Image(c)))
}

pub fn encode_text_cached(tokens: &TokenSeq, params: &ModelParams) -> Result<(Embedding, ForwardCache)> {
    text::forward(tokens, params).map(|(e, c)| (e, ForwardCache::Text(c)))
}

pub fn backward(
    cache: &ForwardCache,
    grad: &[f64],
    params: &ModelParams,
    acc: &mut GradAccumulator,
) -> Result<()> {
    if grad.len() != params.config.embed_dim {
        return Err(Error::Shape {
            expected: format!("gradient of length {}", params.config.embed_dim),
            actual: format!("{}", grad.len()),
        });
    }
    if acc.values.len() != params.values.len() {
        return Err(Error::Shape {
            expected: format!("accumulator of length {}", params.values.len()),
            actual: format!("{}", acc.values.len()),
        });
    }
    match cache {
        ForwardCache::Image(c) => image::backward(c, grad, params, acc),
        ForwardCache::Text(c) => text::backward(c, grad, params, acc),
    }
}
