//! Loaded checkpoints and the request/response types shared by the HTTP
//! service and the `infer` subcommand.

use std::path::{Path, PathBuf};

use affectvlm_core::classify::{pool_frames, Classifier, Probabilities};
use affectvlm_core::encoders::checkpoint;
use affectvlm_core::encoders::Engine;
use affectvlm_core::trainer::TrainConfig;
use affectvlm_core::views::{ImageKind, ViewAngle, ViewImage, ViewName, DEFAULT_SIDE_YAW};
use affectvlm_core::Emotion;
use serde::{Deserialize, Serialize};

pub const THREE_VIEWS: &str = "exactly three views required";

/// A checkpoint ready for inference. Immutable once loaded.
#[derive(Debug)]
pub struct LoadedModel {
    pub classifier: Classifier,
    pub model_id: String,
    pub config: TrainConfig,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub model_id: String,
    pub engine: Engine,
    pub embed_dim: usize,
    pub resolution: [usize; 2],
    pub path: String,
}

impl LoadedModel {
    /// Loads a checkpoint and its sidecar. Training settings that affect
    /// inference (prompt set size and seed, rank pooling) come from the
    /// sidecar's config; missing settings fall back to defaults.
    pub fn load(path: &Path) -> affectvlm_core::Result<LoadedModel> {
        let ckpt = checkpoint::load(path)?;
        let mut config: TrainConfig = if ckpt.sidecar.config.is_null() {
            TrainConfig::default()
        } else {
            serde_json::from_value(ckpt.sidecar.config.clone())?
        };
        config.model = ckpt.params.config;
        let classifier = Classifier::new(ckpt.params, config.prompts_per_class, config.seed)?;
        Ok(LoadedModel {
            classifier,
            model_id: ckpt.model_id,
            config,
            path: path.to_path_buf(),
        })
    }

    pub fn info(&self) -> ModelInfo {
        let m = &self.config.model;
        ModelInfo {
            model_id: self.model_id.clone(),
            engine: m.engine,
            embed_dim: m.embed_dim,
            resolution: [m.resolution.height, m.resolution.width],
            path: self.path.display().to_string(),
        }
    }

    pub fn classify(&self, req: &ClassifyInput) -> Result<ClassifyResponse, RequestError> {
        let views = req.decode(self)?;
        let out = self
            .classifier
            .classify(&views)
            .map_err(|e| RequestError::bad_request(e.to_string()))?;
        Ok(ClassifyResponse {
            probabilities: out.probabilities,
            predicted: out.predicted,
            per_view_agreement: out.per_view_agreement,
            model_id: self.model_id.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub probabilities: Probabilities,
    pub predicted: Emotion,
    pub per_view_agreement: Vec<Emotion>,
    pub model_id: String,
}

/// Raw encoded inputs: one image per view and optional frame sequences.
#[derive(Debug, Clone, Default)]
pub struct ClassifyInput {
    pub images: [Option<Vec<u8>>; 3],
    pub sequences: [Option<Vec<Vec<u8>>>; 3],
    pub model_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    BadRequest,
    NotFound,
    Unavailable,
    TooLarge,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestError {
    pub kind: ErrorKind,
    pub message: String,
}

impl RequestError {
    pub fn bad_request(message: impl Into<String>) -> Self {
        RequestError {
            kind: ErrorKind::BadRequest,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for RequestError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for RequestError {}

pub fn view_from_name(name: &str) -> Option<ViewName> {
    ViewName::ALL.into_iter().find(|v| v.name() == name)
}

impl ClassifyInput {
    /// Stores an image for `view`, rejecting duplicates.
    pub fn set_image(&mut self, view: ViewName, bytes: Vec<u8>) -> Result<(), RequestError> {
        let slot = &mut self.images[view.index()];
        if slot.is_some() {
            return Err(RequestError::bad_request(THREE_VIEWS));
        }
        *slot = Some(bytes);
        Ok(())
    }

    pub fn push_frame(&mut self, view: ViewName, bytes: Vec<u8>) {
        self.sequences[view.index()].get_or_insert_with(Vec::new).push(bytes);
    }

    fn decode(&self, model: &LoadedModel) -> Result<Vec<ViewImage>, RequestError> {
        if self.images.iter().any(Option::is_none) {
            return Err(RequestError::bad_request(THREE_VIEWS));
        }
        let with_seq = self.sequences.iter().filter(|s| s.is_some()).count();
        if with_seq != 0 && with_seq != 3 {
            return Err(RequestError::bad_request("frame sequences must be given for all three views or none"));
        }
        let angles = ViewAngle::triple(DEFAULT_SIDE_YAW);
        let decode_one = |bytes: &[u8], angle: ViewAngle| {
            ViewImage::from_png(bytes, angle, ImageKind::Depth)
                .map_err(|e| RequestError::bad_request(format!("could not decode {} image: {e}", angle.name.name())))
        };
        let mut views = Vec::with_capacity(3);
        for (k, angle) in angles.into_iter().enumerate() {
            let img = match &self.sequences[k] {
                Some(frames) => {
                    let frames = frames
                        .iter()
                        .map(|b| decode_one(b, angle))
                        .collect::<Result<Vec<_>, _>>()?;
                    pool_frames(&frames, &model.config.rankpool).map_err(|e| RequestError::bad_request(e.to_string()))?
                }
                None => decode_one(self.images[k].as_deref().expect("checked above"), angle)?,
            };
            views.push(img);
        }
        let (h, w) = (views[0].height, views[0].width);
        if views.iter().any(|v| v.height != h || v.width != w) {
            return Err(RequestError::bad_request("all views must have the same dimensions"));
        }
        let r = model.config.model.resolution;
        if (h, w) != (r.height, r.width) {
            return Err(RequestError::bad_request(format!(
                "images are {h}x{w} but model {} expects {}x{}",
                model.model_id, r.height, r.width
            )));
        }
        Ok(views)
    }
}
