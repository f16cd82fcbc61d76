use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{train, Dataset, TrainConfig};
use crate::classify::Classifier;
use crate::datagen::Corpus;
use crate::emotion::NUM_EMOTIONS;
use crate::encoders::ModelParams;
use crate::error::{Error, Result};
use crate::rng;

pub const NUM_FOLDS: usize = 10;
const TAG_FOLDS: u64 = 0xF01D;

/// Ten disjoint subject sets covering every subject.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub folds: Vec<BTreeSet<u32>>,
}

impl FoldSplit {
    pub fn train_subjects(&self, fold: usize) -> BTreeSet<u32> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != fold)
            .flat_map(|(_, f)| f.iter().copied())
            .collect()
    }
}

/// Shuffles subjects by `seed` and deals them round-robin into ten folds.
pub fn make_folds(subjects: &BTreeSet<u32>, seed: u64) -> Result<FoldSplit> {
    if subjects.len() < NUM_FOLDS {
        return Err(Error::Protocol(format!(
            "{NUM_FOLDS}-fold subject-independent splits need at least {NUM_FOLDS} subjects, got {}",
            subjects.len()
        )));
    }
    let mut ids: Vec<u32> = subjects.iter().copied().collect();
    ids.shuffle(&mut rng::stream(&[seed, TAG_FOLDS]));
    let mut folds = vec![BTreeSet::new(); NUM_FOLDS];
    for (k, id) in ids.into_iter().enumerate() {
        folds[k % NUM_FOLDS].insert(id);
    }
    Ok(FoldSplit { folds })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: [[usize; NUM_EMOTIONS]; NUM_EMOTIONS],
    pub samples: usize,
}

/// Zero-shot accuracy on clean inputs of subjects never seen in training.
pub fn evaluate(
    params: &ModelParams,
    test: &Dataset,
    train_subjects: &BTreeSet<u32>,
    config: &TrainConfig,
) -> Result<EvalReport> {
    test.check_nonempty()?;
    if let Some(s) = test.subjects().intersection(train_subjects).next() {
        return Err(Error::Protocol(format!("subject {s} appears in both train and test data")));
    }
    let classifier = Classifier::new(params.clone(), config.prompts_per_class, config.seed)?;
    let mut confusion = [[0usize; NUM_EMOTIONS]; NUM_EMOTIONS];
    for s in &test.samples {
        let views = if config.single_view { &s.views[..1] } else { &s.views[..] };
        let out = classifier.classify(views)?;
        confusion[s.emotion.index()][out.predicted.index()] += 1;
    }
    let correct: usize = (0..NUM_EMOTIONS).map(|i| confusion[i][i]).sum();
    Ok(EvalReport {
        accuracy: correct as f64 / test.len() as f64,
        confusion,
        samples: test.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub test_subjects: Vec<u32>,
    pub accuracy: f64,
    pub confusion: [[usize; NUM_EMOTIONS]; NUM_EMOTIONS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldReport>,
    pub mean: f64,
    /// Sample standard deviation over folds.
    pub std: f64,
    /// Sum of the per-fold confusion matrices.
    pub confusion: [[usize; NUM_EMOTIONS]; NUM_EMOTIONS],
}

fn run_cv<F>(corpus: &Corpus, config: &TrainConfig, mut fit: F) -> Result<CvReport>
where
    F: FnMut(&Dataset, usize) -> Result<ModelParams>,
{
    config.validate()?;
    let data = Dataset::build(corpus, config)?;
    let split = make_folds(&data.subjects(), config.seed)?;
    let mut folds = Vec::with_capacity(NUM_FOLDS);
    let mut confusion = [[0usize; NUM_EMOTIONS]; NUM_EMOTIONS];
    for (k, test_subjects) in split.folds.iter().enumerate() {
        let train_subjects = split.train_subjects(k);
        let train_set = data.select(&train_subjects, true);
        let test_set = data.select(test_subjects, true);
        let params = fit(&train_set, k)?;
        let report = evaluate(&params, &test_set, &train_set.subjects(), config)?;
        for (row, add) in confusion.iter_mut().zip(&report.confusion) {
            row.iter_mut().zip(add).for_each(|(a, b)| *a += b);
        }
        folds.push(FoldReport {
            fold: k,
            test_subjects: test_subjects.iter().copied().collect(),
            accuracy: report.accuracy,
            confusion: report.confusion,
        });
    }
    let accs: Vec<f64> = folds.iter().map(|f| f.accuracy).collect();
    let (mean, std) = mean_std(&accs);
    Ok(CvReport {
        folds,
        mean,
        std,
        confusion,
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Ten-fold subject-independent cross-validation: train on nine folds,
/// evaluate on the held-out one.
pub fn cross_validate(corpus: &Corpus, config: &TrainConfig) -> Result<CvReport> {
    run_cv(corpus, config, |train_set, _| Ok(train(train_set, config)?.params))
}

/// The same splits evaluated with untrained, randomly initialised weights.
pub fn random_baseline(corpus: &Corpus, config: &TrainConfig) -> Result<CvReport> {
    run_cv(corpus, config, |_, fold| {
        ModelParams::init(config.model, rng::derive_seed(&[config.seed, 0xBA5E, fold as u64]))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    NoMixaug,
    /// One prompt per class instead of a metadata-conditioned pool.
    NoPromptAugmentation,
    SingleView,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NoMixaug,
        Ablation::NoPromptAugmentation,
        Ablation::SingleView,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoMixaug => "no-mixaug",
            Ablation::NoPromptAugmentation => "no-prompt-augmentation",
            Ablation::SingleView => "single-view",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Ablation::Full => {}
            Ablation::NoMixaug => c.mixaug = false,
            Ablation::NoPromptAugmentation => c.prompts_per_class = 1,
            Ablation::SingleView => c.single_view = true,
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub report: CvReport,
}

pub fn run_ablations(corpus: &Corpus, base: &TrainConfig, which: &[Ablation]) -> Result<Vec<AblationRow>> {
    which
        .iter()
        .map(|&a| {
            Ok(AblationRow {
                ablation: a,
                report: cross_validate(corpus, &a.apply(base))?,
            })
        })
        .collect()
}

/// Markdown comparison table of ablation results.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("| variant | mean acc | std | min fold | max fold |\n|---|---|---|---|---|\n");
    for r in rows {
        let accs = r.report.folds.iter().map(|f| f.accuracy);
        let lo = accs.clone().fold(f64::INFINITY, f64::min);
        let hi = accs.fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(
            s,
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} |",
            r.ablation.name(),
            r.report.mean,
            r.report.std,
            lo,
            hi
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_subjects_give_singleton_folds() {
        let s: BTreeSet<u32> = (0..10).collect();
        let f = make_folds(&s, 4).unwrap();
        assert!(f.folds.iter().all(|x| x.len() == 1));
        assert_eq!(f, make_folds(&s, 4).unwrap());
    }

    #[test]
    fn folds_partition_subjects() {
        let s: BTreeSet<u32> = (100..201).collect();
        let f = make_folds(&s, 9).unwrap();
        assert_eq!(f.folds.len(), NUM_FOLDS);
        assert!(f.folds.iter().all(|x| x.len() == 10 || x.len() == 11));
        let union: BTreeSet<u32> = f.folds.iter().flatten().copied().collect();
        assert_eq!(union, s);
        assert_eq!(f.folds.iter().map(BTreeSet::len).sum::<usize>(), s.len());
        for k in 0..NUM_FOLDS {
            assert!(f.train_subjects(k).is_disjoint(&f.folds[k]));
        }
        assert_ne!(f, make_folds(&s, 10).unwrap());
    }

    #[test]
    fn too_few_subjects_is_a_protocol_error() {
        let s: BTreeSet<u32> = (0..9).collect();
        assert!(matches!(make_folds(&s, 0), Err(Error::Protocol(_))));
    }

    #[test]
    fn mean_and_sample_std() {
        let (m, s) = mean_std(&[0.5, 0.7, 0.9]);
        assert!((m - 0.7).abs() < 1e-15);
        assert!((s - 0.2).abs() < 1e-15);
    }
}
