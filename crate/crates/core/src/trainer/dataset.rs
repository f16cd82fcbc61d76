use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::datagen::{Corpus, FaceSequence};
use crate::dynimg::dynamic_multiview;
use crate::emotion::Emotion;
use crate::error::{Error, Result};
use crate::prompts::{class_prompt_set, expand, tokenize, TokenSeq};
use crate::rng;
use crate::views::{render_multiview, ViewImage};

/// Which clean image each view contributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    /// Depth image of the apex (last) frame.
    #[default]
    Apex,
    /// Rank-pooled dynamic image of the whole sequence.
    Dynamic,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub subject: u32,
    pub emotion: Emotion,
    /// Clean frontal, left and right images.
    pub views: [ViewImage; 3],
    /// Tokenised prompt pool this sample draws its text embeddings from.
    pub prompts: Vec<TokenSeq>,
}

/// Pre-rendered training or test samples.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

const TAG_POOL: u64 = 0x9001;

pub fn render_views(seq: &FaceSequence, config: &TrainConfig) -> Result<[ViewImage; 3]> {
    let res = config.model.resolution;
    let sample = match config.input {
        InputMode::Apex => render_multiview(seq, seq.num_frames().saturating_sub(1), res, config.side_yaw)?,
        InputMode::Dynamic => dynamic_multiview(seq, &config.rankpool, res, config.side_yaw)?,
    };
    Ok(sample.views)
}

impl Dataset {
    /// Renders every sequence and builds its metadata-conditioned prompt pool.
    pub fn build(corpus: &Corpus, config: &TrainConfig) -> Result<Dataset> {
        let samples = corpus
            .sequences
            .iter()
            .map(|seq| {
                let sid = seq.subject.subject_id;
                let texts = if config.prompts_per_class == 1 {
                    class_prompt_set(seq.emotion, 1, config.seed)
                } else {
                    let pool_seed = rng::derive_seed(&[config.seed, TAG_POOL, sid as u64]);
                    expand(seq.emotion, &seq.subject, config.prompts_per_class, pool_seed)?.prompts
                };
                Ok(Sample {
                    subject: sid,
                    emotion: seq.emotion,
                    views: render_views(seq, config)?,
                    prompts: texts.iter().map(|t| tokenize(t)).collect::<Result<_>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subjects(&self) -> BTreeSet<u32> {
        self.samples.iter().map(|s| s.subject).collect()
    }

    /// Samples whose subject is (or is not) in `subjects`.
    pub fn select(&self, subjects: &BTreeSet<u32>, keep: bool) -> Dataset {
        Dataset {
            samples: self
                .samples
                .iter()
                .filter(|s| subjects.contains(&s.subject) == keep)
                .cloned()
                .collect(),
        }
    }

    pub(crate) fn check_nonempty(&self) -> Result<()> {
        if self.is_empty() {
            Err(Error::invalid("dataset is empty"))
        } else {
            Ok(())
        }
    }
}
