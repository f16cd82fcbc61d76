//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "AVLMCKPT"
//! version    u32 LE
//! engine id  u32 LE
//! embed dim  u32 LE
//! alpha      f64 LE
//! n tensors  u32 LE
//! index      n x { name_len u32, name utf-8, offset u64, length u64 }
//! blobs      little-endian f32 values
//! ```
//!
//! `offset` is a byte offset from the start of the blob section and `length`
//! counts f32 values. The remaining model hyper-parameters live in a JSON
//! sidecar next to the checkpoint (`<path>.json`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{build_layout, Engine, ModelConfig, ModelParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"AVLMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format_version: u32,
    pub model: ModelConfig,
    pub seed: u64,
    /// Echo of the configuration the model was trained with.
    #[serde(default)]
    pub config: serde_json::Value,
    /// Free-form training metadata (steps, final loss, corpus, ...).
    #[serde(default)]
    pub training: serde_json::Value,
}

impl Sidecar {
    pub fn new(model: ModelConfig, seed: u64) -> Sidecar {
        Sidecar {
            format_version: CHECKPOINT_VERSION,
            model,
            seed,
            config: serde_json::Value::Null,
            training: serde_json::Value::Null,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub sidecar: Sidecar,
    /// Truncated SHA-256 of the binary checkpoint.
    pub model_id: String,
    pub path: Option<PathBuf>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn model_id(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + params.values.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&params.config.engine.id().to_le_bytes());
    out.extend_from_slice(&(params.config.embed_dim as u32).to_le_bytes());
    out.extend_from_slice(&params.alpha.to_le_bytes());
    out.extend_from_slice(&(params.layout.len() as u32).to_le_bytes());
    for spec in &params.layout {
        out.extend_from_slice(&(spec.name.len() as u32).to_le_bytes());
        out.extend_from_slice(spec.name.as_bytes());
        out.extend_from_slice(&((spec.offset * 4) as u64).to_le_bytes());
        out.extend_from_slice(&(spec.len as u64).to_le_bytes());
    }
    for v in &params.values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.bytes.len() as u64,
                message: format!("truncated checkpoint while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn error(&self, at: usize, message: String) -> Error {
        Error::Parse {
            offset: at as u64,
            message,
        }
    }
}

/// Decodes a checkpoint against the model configuration from its sidecar.
pub fn decode(bytes: &[u8], config: ModelConfig) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(r.error(0, "bad magic (not an AVLMCKPT checkpoint)".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let at = r.pos;
    let engine_id = r.u32("engine id")?;
    let engine = Engine::from_id(engine_id)
        .ok_or_else(|| r.error(at, format!("unknown engine id {engine_id}")))?;
    if engine != config.engine {
        return Err(r.error(
            at,
            format!("checkpoint engine {engine} does not match sidecar engine {}", config.engine),
        ));
    }
    let at = r.pos;
    let dim = r.u32("embedding dim")? as usize;
    if dim != config.embed_dim {
        return Err(r.error(
            at,
            format!("checkpoint dim {dim} does not match sidecar dim {}", config.embed_dim),
        ));
    }
    let alpha = r.f64("alpha")?;
    let count = r.u32("tensor count")? as usize;
    let layout = build_layout(&config);
    if count != layout.len() {
        return Err(r.error(
            r.pos - 4,
            format!("checkpoint has {count} tensors, model expects {}", layout.len()),
        ));
    }
    let mut index = Vec::with_capacity(count);
    for spec in &layout {
        let at = r.pos;
        let len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| r.error(at, "tensor name is not UTF-8".into()))?;
        let offset = r.u64("tensor offset")?;
        let length = r.u64("tensor length")?;
        if name != spec.name || length as usize != spec.len || offset as usize != spec.offset * 4 {
            return Err(r.error(
                at,
                format!(
                    "tensor entry '{name}' ({length} values at byte {offset}) does not match expected '{}' ({} values at byte {})",
                    spec.name,
                    spec.len,
                    spec.offset * 4
                ),
            ));
        }
        index.push((offset as usize, length as usize));
    }
    let blob_start = r.pos;
    let total: usize = layout.iter().map(|s| s.len).sum();
    let blob = r.take(total * 4, "parameter blobs")?;
    if r.pos != bytes.len() {
        return Err(r.error(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mut values = vec![0.0; total];
    for (spec, (offset, length)) in layout.iter().zip(index) {
        for (k, chunk) in blob[offset..offset + length * 4].chunks_exact(4).enumerate() {
            values[spec.offset + k] = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
    }
    debug_assert!(blob_start > 0);
    let params = ModelParams {
        config,
        layout,
        values,
        alpha,
    };
    if !params.is_finite() {
        return Err(Error::Parse {
            offset: blob_start as u64,
            message: "checkpoint contains non-finite values".into(),
        });
    }
    Ok(params)
}

/// Writes the binary checkpoint and its JSON sidecar; returns the model id.
pub fn save(path: impl AsRef<Path>, params: &ModelParams, sidecar: &Sidecar) -> Result<String> {
    let path = path.as_ref();
    if sidecar.model != params.config {
        return Err(Error::Usage("sidecar model config differs from the parameters' config".into()));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = encode(params);
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let mut text = serde_json::to_string_pretty(sidecar)?;
    text.push('\n');
    fs::write(&side, text).map_err(|e| Error::io(side, e))?;
    Ok(model_id(&bytes))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text)
        .map_err(|e| crate::datagen::io::json_parse_error(&text, &e))?;
    if sidecar.format_version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: sidecar.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    sidecar.model.validate()?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let params = decode(&bytes, sidecar.model)?;
    Ok(Checkpoint {
        params,
        sidecar,
        model_id: model_id(&bytes),
        path: Some(path.to_path_buf()),
    })
}
