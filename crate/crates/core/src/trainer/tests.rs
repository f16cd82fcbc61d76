use super::*;
use crate::datagen::{Corpus, CorpusSpec};
use crate::views::Resolution;

fn corpus(seed: u64) -> Corpus {
    Corpus::generate(&CorpusSpec {
        n_subjects: 10,
        frames_per_sequence: 2,
        points_per_face: 1024,
        seed,
        identity_scale: 0.1,
        expression_scale: 2.0,
    })
    .unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        model: ModelConfig {
            resolution: Resolution::square(32),
            patch_width: 8,
            hidden: 16,
            embed_dim: 16,
            text_width: 8,
            text_hidden: 16,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn dataset(config: &TrainConfig) -> Dataset {
    Dataset::build(&corpus(3), config).unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let config = TrainConfig {
        lr: 0.0,
        alpha_lr: 0.0,
        epochs: 1,
        ..small_config()
    };
    let out = train(&dataset(&config), &config).unwrap();
    let init = ModelParams::init(config.model, config.seed).unwrap();
    assert_eq!(out.params.values, init.values);
    assert_eq!(out.params.alpha.to_bits(), init.alpha.to_bits());
    assert!(!out.metrics.is_empty());
}

#[test]
fn loss_falls_and_margin_stays_clamped() {
    let mut deltas = Vec::new();
    for seed in 0..5 {
        let config = TrainConfig {
            seed,
            alpha_lr: 1e-2,
            ..small_config()
        };
        let out = train(&dataset(&config), &config).unwrap();
        let m = &out.metrics;
        assert!(m.iter().all(|s| (ALPHA_MIN..=ALPHA_MAX).contains(&s.alpha)));
        assert!(m.iter().all(|s| (s.total - (s.l_mc_pos + s.l_mc_neg + s.l_mt)).abs() < 1e-9));
        deltas.push(m[m.len() - 1].total - m[0].total);
    }
    deltas.sort_by(f64::total_cmp);
    assert!(deltas[2] < 0.0, "{deltas:?}");
}

#[test]
fn serial_training_is_deterministic() {
    let config = small_config();
    let data = dataset(&config);
    let a = train(&data, &config).unwrap();
    let b = train(&data, &config).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.metrics, b.metrics);
    let c = train(&data, &TrainConfig { seed: 1, ..config }).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn one_tcp_worker_matches_serial_bit_for_bit() {
    let config = TrainConfig {
        max_steps: Some(6),
        ..small_config()
    };
    let data = dataset(&config);
    let serial = train(&data, &config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let tcp = train_distributed(&data, &config, &dir.path().join("launch.json")).unwrap();
    assert_eq!(serial.params, tcp.params);
    assert_eq!(serial.metrics, tcp.metrics);
}

#[test]
fn two_workers_track_serial() {
    let config = TrainConfig {
        max_steps: Some(5),
        ..small_config()
    };
    let data = dataset(&config);
    let serial = train(&data, &config).unwrap();
    let dist = train(&data, &TrainConfig { workers: 2, ..config }).unwrap();
    let diff = serial
        .params
        .values
        .iter()
        .zip(&dist.params.values)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff <= 1e-9, "{diff}");
    for (a, b) in serial.metrics.iter().zip(&dist.metrics) {
        assert!((a.total - b.total).abs() <= 1e-9);
    }
}

#[test]
fn divergence_names_the_step() {
    let config = TrainConfig {
        lr: 1e300,
        optimizer: OptimizerKind::Sgd,
        ..small_config()
    };
    match train(&dataset(&config), &config) {
        Err(Error::Diverged { step, .. }) => assert!(step < 5),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn batches_mix_emotions_and_cover_each_sample_once() {
    let config = small_config();
    let data = dataset(&config);
    let batches = epoch_batches(&data, 8, 0, 0);
    assert_eq!(batches.len(), data.len() / 8);
    let mut seen = std::collections::HashSet::new();
    for b in &batches {
        assert_eq!(b.len(), 8);
        let first = data.samples[b[0]].emotion;
        assert!(b.iter().any(|&i| data.samples[i].emotion != first));
        assert!(b.iter().all(|&i| seen.insert(i)));
    }
    assert_eq!(batches, epoch_batches(&data, 8, 0, 0));
    assert_ne!(batches, epoch_batches(&data, 8, 0, 1));
}

#[test]
fn single_emotion_data_cannot_form_batches() {
    let config = small_config();
    let mut data = dataset(&config);
    data.samples.retain(|s| s.emotion == crate::Emotion::Fear);
    assert!(matches!(train(&data, &config), Err(Error::Protocol(_))));
}

#[test]
fn config_validation() {
    let bad = [
        TrainConfig { batch_size: 1, ..TrainConfig::default() },
        TrainConfig { workers: 3, ..TrainConfig::default() },
        TrainConfig { epochs: 0, ..TrainConfig::default() },
        TrainConfig { tau: -1.0, ..TrainConfig::default() },
        TrainConfig { text_per_sample: 0, ..TrainConfig::default() },
    ];
    for c in bad {
        assert!(c.validate().is_err(), "{c:?}");
    }
    let json = serde_json::to_string(&TrainConfig::default()).unwrap();
    assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), TrainConfig::default());
    let partial: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "optimizer": {"kind": "sgd"}}"#).unwrap();
    assert_eq!(partial.epochs, 3);
    assert_eq!(partial.optimizer, OptimizerKind::Sgd);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
}

#[test]
fn metrics_lines_are_json_objects() {
    let config = TrainConfig {
        max_steps: Some(3),
        ..small_config()
    };
    let out = train(&dataset(&config), &config).unwrap();
    let mut buf = Vec::new();
    write_metrics(&mut buf, &out.metrics).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let back: Vec<StepMetrics> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(back, out.metrics);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    let keys: Vec<&str> = first.as_object().unwrap().keys().map(String::as_str).collect();
    for k in ["step", "l_mc_pos", "l_mc_neg", "l_mt", "total", "alpha"] {
        assert!(keys.contains(&k));
    }
}

#[test]
fn evaluation_rejects_subject_overlap_and_matches_trace() {
    let config = TrainConfig {
        max_steps: Some(4),
        ..small_config()
    };
    let data = dataset(&config);
    let params = train(&data, &config).unwrap().params;
    assert!(matches!(
        evaluate(&params, &data, &data.subjects(), &config),
        Err(Error::Protocol(_))
    ));
    let r = evaluate(&params, &data, &Default::default(), &config).unwrap();
    let trace: usize = (0..6).map(|i| r.confusion[i][i]).sum();
    assert_eq!(trace as f64 / r.samples as f64, r.accuracy);
    for (i, row) in r.confusion.iter().enumerate() {
        let n = data.samples.iter().filter(|s| s.emotion.index() == i).count();
        assert_eq!(row.iter().sum::<usize>(), n);
    }
}
