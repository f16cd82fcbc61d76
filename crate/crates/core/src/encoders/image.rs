use super::dense::{tanh_backward, tanh_in_place};
use super::{normalize_backward, Embedding, GradAccumulator, ModelParams, CONV_GRID};
use crate::error::{Error, Result};
use crate::views::ViewImage;

#[derive(Debug, Clone)]
pub struct ImageCache {
    stem: StemCache,
    /// Pooled stem features fed to the head.
    feat: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    out: Vec<f64>,
    norm: f64,
}

#[derive(Debug, Clone)]
enum StemCache {
    /// Raw pixels; the stem features are the patch activations themselves.
    Patch { input: Vec<f64> },
    Conv {
        input: Vec<f64>,
        act1: Vec<f64>,
        act2: Vec<f64>,
    },
}

fn check_dims(img: &ViewImage, params: &ModelParams) -> Result<()> {
    let r = params.config.resolution;
    if img.height != r.height || img.width != r.width || img.pixels.len() != r.pixels() {
        return Err(Error::Shape {
            expected: format!("{}x{} image for engine {}", r.height, r.width, params.config.engine),
            actual: format!("{}x{} ({} pixels)", img.height, img.width, img.pixels.len()),
        });
    }
    Ok(())
}

/// Pixels of patch `k` (raster order) as a `p*p` vector.
fn patch(pixels: &[f64], w: usize, p: usize, k: usize) -> Vec<f64> {
    let per_row = w / p;
    let (pr, pc) = (k / per_row, k % per_row);
    let mut out = Vec::with_capacity(p * p);
    for row in pr * p..(pr + 1) * p {
        out.extend_from_slice(&pixels[row * w + pc * p..row * w + (pc + 1) * p]);
    }
    out
}

pub fn forward(img: &ViewImage, params: &ModelParams) -> Result<(Embedding, ImageCache)> {
    check_dims(img, params)?;
    let v = &params.values;
    let (h, w) = (img.height, img.width);
    let (stem, feat) = match params.config.engine.patch_size() {
        Some(p) => {
            // shared projection of each patch, tanh, concatenated in raster order
            let proj = params.dense("img.patch");
            let mut feat = Vec::with_capacity((h / p) * (w / p) * proj.out);
            for k in 0..(h / p) * (w / p) {
                feat.extend(proj.forward(v, &patch(&img.pixels, w, p, k)));
            }
            tanh_in_place(&mut feat);
            (
                StemCache::Patch {
                    input: img.pixels.clone(),
                },
                feat,
            )
        }
        None => {
            let [c1, c2] = params.config.conv_channels;
            let w1 = params.dense("img.conv1");
            let w2 = params.dense("img.conv2");
            let mut act1 = conv_s2(v, &w1, &img.pixels, 1, h, w, c1);
            tanh_in_place(&mut act1);
            let mut act2 = conv_s2(v, &w2, &act1, c1, h / 2, w / 2, c2);
            tanh_in_place(&mut act2);
            let feat = grid_pool(&act2, c2, h / 4, w / 4);
            (
                StemCache::Conv {
                    input: img.pixels.clone(),
                    act1,
                    act2,
                },
                feat,
            )
        }
    };
    let mut a1 = params.dense("img.l1").forward(v, &feat);
    tanh_in_place(&mut a1);
    let mut a2 = params.dense("img.l2").forward(v, &a1);
    tanh_in_place(&mut a2);
    let z = params.dense("img.head").forward(v, &a2);
    let (emb, norm) = Embedding::normalize(&z);
    let cache = ImageCache {
        stem,
        feat,
        a1,
        a2,
        out: emb.0.clone(),
        norm,
    };
    Ok((emb, cache))
}

/// Average-pools each `h x w` channel onto a `CONV_GRID x CONV_GRID` grid.
fn grid_pool(act: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let (bh, bw) = (h / CONV_GRID, w / CONV_GRID);
    let inv = 1.0 / (bh * bw) as f64;
    let mut out = vec![0.0; channels * CONV_GRID * CONV_GRID];
    for c in 0..channels {
        for y in 0..h {
            for x in 0..w {
                out[(c * CONV_GRID + y / bh) * CONV_GRID + x / bw] += act[(c * h + y) * w + x] * inv;
            }
        }
    }
    out
}

pub fn backward(
    cache: &ImageCache,
    grad: &[f64],
    params: &ModelParams,
    acc: &mut GradAccumulator,
) -> Result<()> {
    let v = &params.values;
    let g = &mut acc.values;
    let gz = normalize_backward(&cache.out, cache.norm, grad);
    let ga2 = params.dense("img.head").backward(v, g, &cache.a2, &gz);
    let gp2 = tanh_backward(&cache.a2, &ga2);
    let ga1 = params.dense("img.l2").backward(v, g, &cache.a1, &gp2);
    let gp1 = tanh_backward(&cache.a1, &ga1);
    let gfeat = params.dense("img.l1").backward(v, g, &cache.feat, &gp1);
    let r = params.config.resolution;
    let (h, w) = (r.height, r.width);
    match &cache.stem {
        StemCache::Patch { input } => {
            let p = params.config.engine.patch_size().expect("patch engine");
            let proj = params.dense("img.patch");
            let gpre = tanh_backward(&cache.feat, &gfeat);
            for (k, gk) in gpre.chunks_exact(proj.out).enumerate() {
                proj.backward_params(g, &patch(input, w, p, k), gk);
            }
        }
        StemCache::Conv { input, act1, act2 } => {
            let [c1, c2] = params.config.conv_channels;
            let (h4, w4) = (h / 4, w / 4);
            let (bh, bw) = (h4 / CONV_GRID, w4 / CONV_GRID);
            let inv = 1.0 / (bh * bw) as f64;
            let mut gpre2 = vec![0.0; c2 * h4 * w4];
            for c in 0..c2 {
                for y in 0..h4 {
                    for x in 0..w4 {
                        let i = (c * h4 + y) * w4 + x;
                        let gf = gfeat[(c * CONV_GRID + y / bh) * CONV_GRID + x / bw];
                        gpre2[i] = gf * inv * (1.0 - act2[i] * act2[i]);
                    }
                }
            }
            let w2 = params.dense("img.conv2");
            let mut ga1 = conv_s2_backward(v, g, &w2, act1, c1, h / 2, w / 2, c2, &gpre2, true);
            for (gi, a) in ga1.iter_mut().zip(act1) {
                *gi *= 1.0 - a * a;
            }
            let w1 = params.dense("img.conv1");
            conv_s2_backward(v, g, &w1, input, 1, h, w, c1, &ga1, false);
        }
    }
    Ok(())
}

/// 3x3 convolution, stride 2, zero padding 1: `cin x h x w -> cout x h/2 x w/2`.
/// Weight row `o` is laid out as `[cin][ky][kx]`.
fn conv_s2(
    params: &[f64],
    layer: &super::Dense,
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let weights = &params[layer.w.clone()];
    let bias = &params[layer.b.clone()];
    let mut out = vec![0.0; cout * ho * wo];
    for o in 0..cout {
        let wrow = &weights[o * cin * 9..(o + 1) * cin * 9];
        for i in 0..ho {
            for j in 0..wo {
                let mut s = bias[o];
                for c in 0..cin {
                    for ky in 0..3 {
                        let y = (2 * i + ky) as isize - 1;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let x = (2 * j + kx) as isize - 1;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            s += wrow[c * 9 + ky * 3 + kx]
                                * input[c * h * w + y as usize * w + x as usize];
                        }
                    }
                }
                out[o * ho * wo + i * wo + j] = s;
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients of [`conv_s2`] given dL/d(output) and
/// optionally returns dL/d(input).
#[allow(clippy::too_many_arguments)]
fn conv_s2_backward(
    params: &[f64],
    grads: &mut [f64],
    layer: &super::Dense,
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    gout: &[f64],
    want_input_grad: bool,
) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let weights = &params[layer.w.clone()];
    let mut gin = if want_input_grad {
        vec![0.0; cin * h * w]
    } else {
        Vec::new()
    };
    for o in 0..cout {
        let wbase = layer.w.start + o * cin * 9;
        for i in 0..ho {
            for j in 0..wo {
                let go = gout[o * ho * wo + i * wo + j];
                if go == 0.0 {
                    continue;
                }
                grads[layer.b.start + o] += go;
                for c in 0..cin {
                    for ky in 0..3 {
                        let y = (2 * i + ky) as isize - 1;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let x = (2 * j + kx) as isize - 1;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            let idx = c * h * w + y as usize * w + x as usize;
                            let k = c * 9 + ky * 3 + kx;
                            grads[wbase + k] += go * input[idx];
                            if want_input_grad {
                                gin[idx] += go * weights[o * cin * 9 + k];
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}
