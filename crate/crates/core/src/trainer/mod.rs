//! Training loop, data-parallel workers and the subject-independent
//! cross-validation harness.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::affectloss::{loss_backward, mine_pairs, BatchItem, Hinge, LossBreakdown, Modality, SimilarityKind};
use crate::dynimg::RankPoolConfig;
use crate::encoders::{GradAccumulator, ModelConfig, ModelParams, Tape};
#[cfg(test)]
use crate::encoders::{ALPHA_MAX, ALPHA_MIN};
use crate::error::{Error, Result};
use crate::mixaug::{apply_plan, plan_epoch, MixedAugPlan};
use crate::optim::{Optimizer, OptimizerKind};
use crate::prompts::DEFAULT_PROMPTS_PER_CLASS;
use crate::rng;
use crate::views::DEFAULT_SIDE_YAW;

pub mod collective;
mod cv;
mod dataset;
mod sampler;

pub use collective::{spawn_local, Collective, LaunchInfo, SingleWorker, TcpCollective};
pub use cv::{
    ablation_table, cross_validate, evaluate, make_folds, random_baseline, run_ablations, Ablation, AblationRow,
    CvReport, EvalReport, FoldReport, FoldSplit, NUM_FOLDS,
};
pub use dataset::{render_views, Dataset, InputMode, Sample};
pub use sampler::epoch_batches;

const TAG_TEXT: u64 = 0x7E47;
const TAG_MINE: u64 = 0x313E;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Samples per step across all workers.
    pub batch_size: usize,
    pub lr: f64,
    /// Step size of the learnable margin.
    pub alpha_lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub workers: usize,
    /// Softplus temperature of the hinges; 0 selects the exact hinge.
    pub tau: f64,
    pub similarity: SimilarityKind,
    pub model: ModelConfig,
    pub input: InputMode,
    pub side_yaw: f64,
    pub rankpool: RankPoolConfig,
    /// Prompt pool size per sample, and class prompt set size at evaluation.
    pub prompts_per_class: usize,
    /// Prompt embeddings drawn from the pool for each sample at each step.
    pub text_per_sample: usize,
    pub mixaug: bool,
    /// Train and evaluate on the frontal view only.
    pub single_view: bool,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 8,
            lr: 1e-3,
            alpha_lr: 1e-4,
            optimizer: OptimizerKind::default(),
            seed: 0,
            workers: 1,
            tau: 0.0,
            similarity: SimilarityKind::Cosine,
            model: ModelConfig::default(),
            input: InputMode::Apex,
            side_yaw: DEFAULT_SIDE_YAW,
            rankpool: RankPoolConfig::default(),
            prompts_per_class: DEFAULT_PROMPTS_PER_CLASS,
            text_per_sample: 2,
            mixaug: true,
            single_view: false,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.rankpool.validate()?;
        Hinge::from_tau(self.tau)?;
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be >= 2 so a batch can mix emotions"));
        }
        if self.workers == 0 || !self.batch_size.is_multiple_of(self.workers) {
            return Err(Error::invalid(format!(
                "batch_size {} must be a positive multiple of workers {}",
                self.batch_size, self.workers
            )));
        }
        if self.prompts_per_class == 0 || self.text_per_sample == 0 {
            return Err(Error::invalid("prompts_per_class and text_per_sample must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite() && self.alpha_lr >= 0.0 && self.alpha_lr.is_finite()) {
            return Err(Error::invalid("lr and alpha_lr must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn hinge(&self) -> Hinge {
        Hinge::from_tau(self.tau).unwrap_or(Hinge::Exact)
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub l_mc_pos: f64,
    pub l_mc_neg: f64,
    pub l_mt: f64,
    pub total: f64,
    /// Margin after the update.
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub metrics: Vec<StepMetrics>,
}

/// Appends metrics as JSON lines.
pub fn write_metrics<W: Write>(out: &mut W, metrics: &[StepMetrics]) -> Result<()> {
    for m in metrics {
        serde_json::to_writer(&mut *out, m)?;
        out.write_all(b"\n").map_err(|e| Error::io("<metrics>", e))?;
    }
    Ok(())
}

/// Trains on `data`, spawning `config.workers` TCP-connected worker threads
/// when more than one worker is requested.
pub fn train(data: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if config.workers == 1 {
        return train_worker(data, config, &mut SingleWorker);
    }
    static RUN: AtomicU64 = AtomicU64::new(0);
    let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_nanos() as u64);
    let dir = std::env::temp_dir().join(format!(
        "affectvlm-launch-{}-{}-{nanos}",
        std::process::id(),
        RUN.fetch_add(1, Ordering::Relaxed)
    ));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let result = train_distributed(data, config, &dir.join("launch.json"));
    let _ = std::fs::remove_dir_all(&dir);
    result
}

/// Runs all ranks as threads over loopback TCP and returns rank 0's result.
/// Errors if replicas disagree after training.
pub fn train_distributed(data: &Dataset, config: &TrainConfig, launch_file: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    let mut outcomes = spawn_local(config.workers, launch_file, |c| train_worker(data, config, c))?;
    if let Some(r) = outcomes.iter().position(|o| o.params != outcomes[0].params) {
        return Err(Error::Worker {
            rank: r,
            message: "replica diverged from rank 0".into(),
        });
    }
    Ok(outcomes.swap_remove(0))
}

/// Items one sample contributes, in the order they are encoded.
fn sample_modalities(config: &TrainConfig) -> Vec<Modality> {
    let mut m = if config.single_view {
        vec![Modality::Frontal]
    } else {
        vec![Modality::Frontal, Modality::Left, Modality::Right]
    };
    m.extend(std::iter::repeat_n(Modality::Text, config.text_per_sample));
    m
}

/// Pool indices of the prompts a sample uses at one step.
fn pick_prompts(pool: usize, n: usize, seed: u64, epoch: u64, sample: usize) -> Vec<usize> {
    let mut r = rng::stream(&[seed, TAG_TEXT, epoch, sample as u64]);
    if n <= pool {
        index::sample(&mut r, pool, n).into_vec()
    } else {
        use rand::Rng;
        (0..n).map(|_| r.gen_range(0..pool)).collect()
    }
}

/// One rank's training loop. With [`SingleWorker`] this is serial training.
///
/// Every rank encodes its contiguous shard of the batch, the embeddings are
/// all-gathered so that all ranks mine the same pairs and evaluate the same
/// full-batch loss, and each rank backpropagates only through its own
/// embeddings. Scaling the local encoder gradient by the worker count makes
/// the all-reduced mean equal the serial full-batch gradient; the margin
/// gradient is already complete on every rank and is left unscaled.
pub fn train_worker(data: &Dataset, config: &TrainConfig, comm: &mut dyn Collective) -> Result<TrainOutcome> {
    config.validate()?;
    data.check_nonempty()?;
    let (rank, n) = (comm.rank(), comm.size());
    if n != config.workers {
        return Err(Error::invalid(format!("collective has {n} ranks, config asks for {}", config.workers)));
    }
    let mut params = ModelParams::init(config.model, config.seed)?;
    let init = comm.broadcast(&params.values)?;
    params.values = init;
    let mut opt = Optimizer::new(config.optimizer, config.lr, config.alpha_lr, &params)?;
    let modalities = sample_modalities(config);
    let per_sample = modalities.len();
    let dim = config.model.embed_dim;
    let hinge = config.hinge();
    let mut metrics = Vec::new();
    let mut step = 0usize;

    'epochs: for epoch in 0..config.epochs as u64 {
        let plans = if config.mixaug {
            plan_epoch(data.len(), config.seed, epoch)
        } else {
            vec![MixedAugPlan::identity(); data.len()]
        };
        let batches = epoch_batches(data, config.batch_size, config.seed, epoch);
        if batches.is_empty() {
            return Err(Error::Protocol(
                "no batch with two emotions could be formed; add samples or lower batch_size".into(),
            ));
        }
        for batch in batches {
            if config.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let shard = batch.len() / n;
            let local = &batch[rank * shard..(rank + 1) * shard];

            let mut tape = Tape::new();
            let mut ids = Vec::with_capacity(local.len() * per_sample);
            let mut flat = Vec::with_capacity(local.len() * per_sample * dim);
            for &i in local {
                let sample = &data.samples[i];
                let views = apply_plan(&sample.views, &plans[i])?;
                let n_views = if config.single_view { 1 } else { 3 };
                for v in &views[..n_views] {
                    let (id, e) = tape.encode_image(v, &params)?;
                    ids.push(id);
                    flat.extend_from_slice(&e.0);
                }
                for k in pick_prompts(sample.prompts.len(), config.text_per_sample, config.seed, epoch, i) {
                    let (id, e) = tape.encode_text(&sample.prompts[k], &params)?;
                    ids.push(id);
                    flat.extend_from_slice(&e.0);
                }
            }

            let gathered = comm.all_gather(&flat)?.concat();
            if gathered.len() != batch.len() * per_sample * dim {
                return Err(Error::Worker {
                    rank,
                    message: "gathered embeddings have the wrong length".into(),
                });
            }
            let items: Vec<BatchItem> = batch
                .iter()
                .flat_map(|&i| modalities.iter().map(move |&m| (i, m)))
                .zip(gathered.chunks_exact(dim))
                .map(|((i, modality), e)| BatchItem {
                    embedding: e.to_vec(),
                    emotion: data.samples[i].emotion,
                    modality,
                    sample_id: i,
                })
                .collect();
            let pairs = mine_pairs(&items, rng::derive_seed(&[config.seed, TAG_MINE, epoch, step as u64]))?;
            let embeddings: Vec<&[f64]> = items.iter().map(|it| it.embedding.as_slice()).collect();
            let (loss, grads) = loss_backward(&embeddings, &pairs, params.alpha, config.similarity, hinge)?;
            if !loss.total.is_finite() {
                return Err(Error::Diverged {
                    step,
                    value: loss.total,
                });
            }

            let mut acc: GradAccumulator = params.zero_grad();
            let offset = rank * shard * per_sample;
            for (k, id) in ids.into_iter().enumerate() {
                tape.backward(id, &grads.embeddings[offset + k], &params, &mut acc)?;
            }
            if n > 1 {
                acc.values.iter_mut().for_each(|v| *v *= n as f64);
            }
            acc.alpha = grads.alpha;
            let reduced = comm.all_reduce_mean(&acc.to_flat())?;
            opt.step(&mut params, &GradAccumulator::from_flat(&reduced))?;
            if !params.is_finite() {
                return Err(Error::Diverged {
                    step,
                    value: f64::NAN,
                });
            }
            metrics.push(metrics_line(step, &loss, params.alpha));
            step += 1;
        }
    }
    Ok(TrainOutcome { params, metrics })
}

fn metrics_line(step: usize, loss: &LossBreakdown, alpha: f64) -> StepMetrics {
    StepMetrics {
        step,
        l_mc_pos: loss.l_mc_pos,
        l_mc_neg: loss.l_mc_neg,
        l_mt: loss.l_mt,
        total: loss.total,
        alpha,
    }
}

#[cfg(test)]
mod tests;
