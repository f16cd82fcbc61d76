//! Command-line front end. `main` maps results onto exit codes: 0 success,
//! 1 usage error, 2 runtime error.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use affectvlm_core::datagen::io::{load_corpus, save_corpus};
use affectvlm_core::datagen::{Corpus, CorpusSpec};
use affectvlm_core::dynimg::{dynamic_multiview, RankPoolConfig, RankPoolMethod};
use affectvlm_core::encoders::checkpoint::{self, Sidecar};
use affectvlm_core::mixaug::{apply_plan, plan_epoch};
use affectvlm_core::prompts::class_prompt_set;
use affectvlm_core::trainer::{
    ablation_table, cross_validate, random_baseline, render_views, run_ablations, train, write_metrics, Ablation,
    Dataset, TrainConfig,
};
use affectvlm_core::views::{render_multiview, ImageKind, Resolution, ViewImage, DEFAULT_SIDE_YAW};
use affectvlm_core::Emotion;
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::api::{self, AppState, RouterOptions};
use crate::model::{ClassifyInput, LoadedModel};

#[derive(Debug, Parser)]
#[command(name = "affectvlm", version, about = "Multiview vision-language facial expression recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic 4D face corpus.
    GenData(GenData),
    /// Render apex-frame frontal/left/right depth images as PNG.
    RenderViews(RenderViews),
    /// Rank-pool every sequence into per-view dynamic images.
    Rankpool(Rankpool),
    /// Write before/after grids of mixed-view augmentation.
    AugmentPreview(AugmentPreview),
    /// Print a class prompt set.
    Prompts(Prompts),
    /// Train on a whole corpus and save a checkpoint.
    Train(Train),
    /// Ten-fold subject-independent cross-validation.
    EvalCv(EvalCv),
    /// Classify three view PNGs with a checkpoint.
    Infer(Infer),
    /// Run the HTTP inference service.
    Serve(Serve),
}

#[derive(Debug, Args)]
pub struct GenData {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub subjects: usize,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[arg(long, default_value_t = 2048)]
    pub points: usize,
    #[arg(long, default_value_t = 0.3)]
    pub identity_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    pub expression_scale: f64,
}

#[derive(Debug, Args)]
pub struct RenderOpts {
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long, default_value_t = DEFAULT_SIDE_YAW)]
    pub side_yaw: f64,
    /// Only process the first N sequences.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RenderViews {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub render: RenderOpts,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Exact,
    Approximate,
}

#[derive(Debug, Args)]
pub struct Rankpool {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "approximate")]
    pub method: MethodArg,
    #[command(flatten)]
    pub render: RenderOpts,
}

#[derive(Debug, Args)]
pub struct AugmentPreview {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Corpus to draw samples from; a small synthetic one is generated if absent.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[command(flatten)]
    pub render: RenderOpts,
}

#[derive(Debug, Args)]
pub struct Prompts {
    #[arg(long)]
    pub emotion: Emotion,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct Train {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Training config JSON, either a bare config or `{"corpus": .., "train": ..}`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step metrics as JSON lines.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalCv {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub report: PathBuf,
    /// Also evaluate random untrained weights on the same splits.
    #[arg(long)]
    pub baseline: bool,
    /// Also run the ablation variants and print a comparison table.
    #[arg(long)]
    pub ablations: bool,
}

#[derive(Debug, Args)]
pub struct Infer {
    #[arg(long)]
    pub frontal: PathBuf,
    #[arg(long)]
    pub left: PathBuf,
    #[arg(long)]
    pub right: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
}

#[derive(Debug, Args)]
pub struct Serve {
    /// Checkpoint to serve; repeat for several. The first is the default.
    #[arg(long)]
    pub ckpt: Vec<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Directory of static files served for unmatched paths.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
    /// Allowed CORS origin; repeat for several. Any origin when omitted.
    #[arg(long)]
    pub cors_origin: Vec<String>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::RenderViews(a) => render_views_cmd(a),
        Command::Rankpool(a) => rankpool(a),
        Command::AugmentPreview(a) => augment_preview(a),
        Command::Prompts(a) => {
            for p in class_prompt_set(a.emotion, a.n, a.seed) {
                println!("{p}");
            }
            Ok(())
        }
        Command::Train(a) => train_cmd(a),
        Command::EvalCv(a) => eval_cv(a),
        Command::Infer(a) => infer(a),
        Command::Serve(a) => serve(a),
    }
}

fn gen_data(a: GenData) -> Result<()> {
    let spec = CorpusSpec {
        n_subjects: a.subjects,
        frames_per_sequence: a.frames,
        points_per_face: a.points,
        seed: a.seed,
        identity_scale: a.identity_scale,
        expression_scale: a.expression_scale,
    };
    let corpus = Corpus::generate(&spec)?;
    save_corpus(&corpus, &a.out)?;
    eprintln!("wrote {} sequences to {}", corpus.sequences.len(), a.out.display());
    Ok(())
}

fn open_corpus(dir: &Path) -> Result<Corpus> {
    load_corpus(dir).with_context(|| format!("loading corpus from {}", dir.display()))
}

fn resolution(side: usize) -> Result<Resolution> {
    let r = Resolution {
        height: side,
        width: side,
    };
    r.validate()?;
    Ok(r)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn seq_stem(k: usize, c: &Corpus) -> String {
    let s = &c.sequences[k];
    format!("seq_{k:05}_s{:03}_{}", s.subject.subject_id, s.emotion)
}

fn render_views_cmd(a: RenderViews) -> Result<()> {
    let corpus = open_corpus(&a.input)?;
    let res = resolution(a.render.resolution)?;
    fs::create_dir_all(&a.out)?;
    let n = a.render.limit.unwrap_or(usize::MAX).min(corpus.sequences.len());
    for k in 0..n {
        let seq = &corpus.sequences[k];
        let mv = render_multiview(seq, seq.num_frames().saturating_sub(1), res, a.render.side_yaw)?;
        for img in &mv.views {
            let name = format!("{}_{}.png", seq_stem(k, &corpus), img.view.name.name());
            write(&a.out.join(name), &img.to_png()?)?;
        }
    }
    eprintln!("rendered {n} sequences to {}", a.out.display());
    Ok(())
}

fn rankpool(a: Rankpool) -> Result<()> {
    let corpus = open_corpus(&a.input)?;
    let res = resolution(a.render.resolution)?;
    let cfg = RankPoolConfig {
        method: match a.method {
            MethodArg::Exact => RankPoolMethod::Exact,
            MethodArg::Approximate => RankPoolMethod::Approximate,
        },
        ..RankPoolConfig::default()
    };
    fs::create_dir_all(&a.out)?;
    let n = a.render.limit.unwrap_or(usize::MAX).min(corpus.sequences.len());
    for k in 0..n {
        let mv = dynamic_multiview(&corpus.sequences[k], &cfg, res, a.render.side_yaw)?;
        for img in &mv.views {
            let stem = format!("{}_{}", seq_stem(k, &corpus), img.view.name.name());
            write(&a.out.join(format!("{stem}.png")), &img.to_png()?)?;
            // Raw little-endian f64 pixels, row-major, alongside the 8-bit preview.
            let raw: Vec<u8> = img.pixels.iter().flat_map(|p| p.to_le_bytes()).collect();
            write(&a.out.join(format!("{stem}.f64")), &raw)?;
        }
    }
    eprintln!("pooled {n} sequences to {}", a.out.display());
    Ok(())
}

/// Tiles images row by row into one image; every row must have the same width.
fn grid(rows: &[Vec<&ViewImage>]) -> ViewImage {
    let (h, w) = (rows[0][0].height, rows[0][0].width);
    let cols = rows[0].len();
    let mut out = ViewImage::zeros(
        rows[0][0].view,
        ImageKind::Depth,
        Resolution {
            height: h * rows.len(),
            width: w * cols,
        },
    );
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            for y in 0..h {
                let dst = (r * h + y) * out.width + c * w;
                out.pixels[dst..dst + w].copy_from_slice(&img.pixels[y * w..(y + 1) * w]);
            }
        }
    }
    out
}

fn augment_preview(a: AugmentPreview) -> Result<()> {
    let corpus = match &a.corpus {
        Some(dir) => open_corpus(dir)?,
        None => Corpus::generate(&CorpusSpec {
            seed: a.seed,
            ..CorpusSpec::default()
        })?,
    };
    if a.n == 0 || a.n > corpus.sequences.len() {
        bail!("--n must be between 1 and {}", corpus.sequences.len());
    }
    let config = TrainConfig {
        model: affectvlm_core::encoders::ModelConfig {
            resolution: resolution(a.render.resolution)?,
            ..Default::default()
        },
        side_yaw: a.render.side_yaw,
        ..TrainConfig::default()
    };
    fs::create_dir_all(&a.out)?;
    let plans = plan_epoch(a.n, a.seed, 0);
    for (k, plan) in plans.iter().enumerate() {
        let before = render_views(&corpus.sequences[k], &config)?;
        let after = apply_plan(&before, plan)?;
        let img = grid(&[before.iter().collect(), after.iter().collect()]);
        write(&a.out.join(format!("preview_{k:03}.png")), &img.to_png()?)?;
    }
    write(&a.out.join("plans.json"), serde_json::to_string_pretty(&plans)?.as_bytes())?;
    eprintln!("wrote {} previews to {}", a.n, a.out.display());
    Ok(())
}

#[derive(Debug, Deserialize)]
struct Wrapped {
    train: TrainConfig,
}

/// Reads a bare training config or one nested under `"train"`.
pub fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let config = if v.get("train").is_some() {
        serde_json::from_value::<Wrapped>(v).map(|w| w.train)
    } else {
        serde_json::from_value(v)
    }
    .with_context(|| format!("invalid training config in {}", path.display()))?;
    config.validate()?;
    Ok(config)
}

fn train_cmd(a: Train) -> Result<()> {
    let mut config = load_config(a.config.as_deref())?;
    if let Some(w) = a.workers {
        config.workers = w;
    }
    config.validate()?;
    let corpus = open_corpus(&a.corpus)?;
    let data = Dataset::build(&corpus, &config)?;
    let start = Instant::now();
    let outcome = train(&data, &config)?;
    let secs = start.elapsed().as_secs_f64();
    if let Some(path) = &a.metrics {
        let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_metrics(&mut f, &outcome.metrics)?;
    }
    let last = outcome.metrics.last();
    let mut sidecar = Sidecar::new(config.model, config.seed);
    sidecar.config = serde_json::to_value(&config)?;
    sidecar.training = json!({
        "steps": outcome.metrics.len(),
        "final_loss": last.map(|m| m.total),
        "alpha": outcome.params.alpha,
        "samples": data.len(),
        "workers": config.workers,
        "corpus": corpus.spec,
        "seconds": secs,
    });
    let id = checkpoint::save(&a.out, &outcome.params, &sidecar)?;
    let steps_per_sec = outcome.metrics.len() as f64 / secs.max(1e-9);
    eprintln!(
        "trained {} steps in {secs:.1}s ({steps_per_sec:.2} steps/s, {} workers); final loss {:.4}",
        outcome.metrics.len(),
        config.workers,
        last.map_or(f64::NAN, |m| m.total)
    );
    println!("{id}");
    Ok(())
}

fn eval_cv(a: EvalCv) -> Result<()> {
    let config = load_config(a.config.as_deref())?;
    let corpus = open_corpus(&a.corpus)?;
    let report = cross_validate(&corpus, &config)?;
    eprintln!("cv mean accuracy {:.4} (std {:.4})", report.mean, report.std);
    let mut out = serde_json::to_value(&report)?;
    if a.baseline {
        let b = random_baseline(&corpus, &config)?;
        eprintln!("random baseline {:.4}", b.mean);
        out["baseline"] = serde_json::to_value(&b)?;
    }
    if a.ablations {
        let rest: Vec<Ablation> = Ablation::ALL.into_iter().filter(|x| *x != Ablation::Full).collect();
        let mut rows = vec![affectvlm_core::trainer::AblationRow {
            ablation: Ablation::Full,
            report: report.clone(),
        }];
        rows.extend(run_ablations(&corpus, &config, &rest)?);
        print!("{}", ablation_table(&rows));
        out["ablations"] = serde_json::to_value(&rows)?;
    }
    write(&a.report, serde_json::to_string_pretty(&out)?.as_bytes())
}

fn infer(a: Infer) -> Result<()> {
    let model = LoadedModel::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let mut input = ClassifyInput::default();
    for (k, p) in [&a.frontal, &a.left, &a.right].into_iter().enumerate() {
        input.images[k] = Some(fs::read(p).with_context(|| format!("reading {}", p.display()))?);
    }
    let response = model.classify(&input)?;
    println!("{}", serde_json::to_string(&response)?);
    Ok(())
}

fn serve(a: Serve) -> Result<()> {
    let models = a
        .ckpt
        .iter()
        .map(|p| {
            LoadedModel::load(p)
                .map(Arc::new)
                .with_context(|| format!("loading {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    if models.is_empty() {
        eprintln!("warning: no checkpoint given; /classify will answer 503");
    }
    let app = api::router(
        AppState { models },
        &RouterOptions {
            static_dir: a.static_dir,
            cors_origins: a.cors_origin,
        },
    )?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = api::bind(a.addr).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app).await?;
        Ok(())
    })
}
