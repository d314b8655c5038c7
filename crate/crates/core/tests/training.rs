mod common;

use std::path::Path;

use lap_core::embedder::SpeakerBackendConfig;
use lap_core::objectives::Stage;
use lap_core::pooling::AggregationMode;
use lap_core::store::{load_stacks, Manifest};
use lap_core::tensor::{ParamStore, Tensor};
use lap_core::train::synth::read_schedule;
use lap_core::train::{
    make_synth_dataset, train, AdamConfig, Checkpoint, EpochMetrics, KeyValueConfig,
    OptimizerState, RunConfig, SynthSpec, TrainData,
};
use lap_core::Error;
use tempfile::tempdir;

fn small_spec() -> SynthSpec {
    SynthSpec {
        speakers: 6,
        utts_per_speaker: 8,
        channels: 8,
        layers: 4,
        frames: 20,
        segment_len: 5,
        holdout_per_speaker: 2,
        ..SynthSpec::default()
    }
}

fn small_config() -> RunConfig {
    RunConfig {
        model: SpeakerBackendConfig {
            channels: 8,
            layers: 4,
            heads: 2,
            head_dim: 4,
            lap_dim: 8,
            bottleneck: 8,
            emb_dim: 8,
            mode: AggregationMode::SigmoidMax,
        },
        batch_size: 8,
        epochs: 4,
        large_margin_epochs: 1,
        ..RunConfig::default()
    }
}

fn small_data(dir: &Path) -> TrainData {
    let out = make_synth_dataset(&small_spec(), dir).unwrap();
    TrainData::load(&out.train_manifest).unwrap()
}

fn run(cfg: &RunConfig, data: &TrainData) -> (Checkpoint, Vec<EpochMetrics>) {
    let mut log = Vec::new();
    let ck = train(cfg, data, None, None, |m| log.push(*m)).unwrap();
    (ck, log)
}

#[test]
fn synthetic_store_layout() {
    let dir = tempdir().unwrap();
    let spec = small_spec();
    let out = make_synth_dataset(&spec, dir.path()).unwrap();
    let train_m = Manifest::read(&out.train_manifest).unwrap();
    let eval_m = Manifest::read(&out.eval_manifest).unwrap();
    assert_eq!(train_m.rows.len(), 6 * 6);
    assert_eq!(eval_m.rows.len(), 6 * 2);
    assert_eq!(train_m.speaker_index().len(), 6);
    let trials = std::fs::read_to_string(&out.trials).unwrap();
    assert_eq!(trials.lines().count(), 12 * 11 / 2);
    assert_eq!(trials.lines().filter(|l| l.starts_with('1')).count(), 6);
    let schedule = read_schedule(&out.schedule).unwrap();
    assert_eq!(schedule.len(), 48);
    assert!(schedule
        .iter()
        .all(|(_, s)| s.len() == 20 && s.iter().all(|&l| l < 4)));
}

/// Knowing where the speaker sits, averaging those frames and picking the
/// nearest speaker vector identifies every held-out utterance.
#[test]
fn synthetic_speakers_are_recoverable_with_the_schedule() {
    let dir = tempdir().unwrap();
    let spec = SynthSpec::default();
    let out = make_synth_dataset(&spec, dir.path()).unwrap();
    let eval_m = Manifest::read(&out.eval_manifest).unwrap();
    let stacks = load_stacks(&eval_m, dir.path()).unwrap();
    let schedule: std::collections::HashMap<_, _> =
        read_schedule(&out.schedule).unwrap().into_iter().collect();
    let vectors = spec.speaker_vectors();
    let index = eval_m.speaker_index();
    for (row, x) in eval_m.rows.iter().zip(&stacks) {
        let active = &schedule[&row.utt_id];
        let mean: Vec<f64> = (0..spec.channels)
            .map(|c| {
                active
                    .iter()
                    .enumerate()
                    .map(|(t, &l)| x.tensor().at(&[c, l, t]))
                    .sum::<f64>()
            })
            .collect();
        let best = (0..vectors.len())
            .max_by(|&a, &b| {
                let dot = |s: usize| {
                    vectors[s]
                        .iter()
                        .zip(&mean)
                        .map(|(p, q)| p * q)
                        .sum::<f64>()
                };
                dot(a).total_cmp(&dot(b))
            })
            .unwrap();
        assert_eq!(best, index[&row.speaker], "{}", row.utt_id);
    }
}

#[test]
fn training_is_deterministic() {
    let dir = tempdir().unwrap();
    let data = small_data(dir.path());
    let cfg = small_config();
    let (a, log_a) = run(&cfg, &data);
    let one_thread = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let (b, log_b) = one_thread.install(|| run(&cfg, &data));
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(log_a, log_b);
    assert_eq!(a.epoch, 5);
    assert_eq!(a.step, 5 * 36u64.div_ceil(8));

    let (c, _) = run(&RunConfig { seed: 1, ..cfg }, &data);
    assert_ne!(a.to_bytes(), c.to_bytes());
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let dir = tempdir().unwrap();
    let data = small_data(dir.path());
    let cfg = small_config();
    let (full, full_log) = run(&cfg, &data);
    let mut log = Vec::new();
    let partial = train(&cfg, &data, None, Some(2), |m| log.push(*m)).unwrap();
    assert_eq!(partial.epoch, 2);
    let path = dir.path().join("ck.lapc");
    partial.save(&path).unwrap();
    let restored = Checkpoint::load(&path, Some(&cfg)).unwrap();
    let resumed = train(&cfg, &data, Some(restored), None, |m| log.push(*m)).unwrap();
    assert_eq!(resumed.to_bytes(), full.to_bytes());
    assert_eq!(log, full_log);
}

#[test]
fn resume_rejects_another_configuration() {
    let dir = tempdir().unwrap();
    let data = small_data(dir.path());
    let cfg = small_config();
    let partial = train(&cfg, &data, None, Some(1), |_| {}).unwrap();
    let other = RunConfig {
        lr_max: 2e-3,
        ..cfg.clone()
    };
    assert!(matches!(
        train(&other, &data, Some(partial.clone()), None, |_| {}),
        Err(Error::Config(_))
    ));
    let path = dir.path().join("ck.lapc");
    partial.save(&path).unwrap();
    assert!(matches!(
        Checkpoint::load(&path, Some(&other)),
        Err(Error::Config(_))
    ));
}

#[test]
fn checkpoint_round_trip_preserves_embeddings() {
    let dir = tempdir().unwrap();
    let data = small_data(dir.path());
    let (ck, _) = run(&small_config(), &data);
    let path = dir.path().join("ck.lapc");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path, None).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), ck.to_bytes());
    for x in data.stacks.iter().take(5) {
        assert_eq!(
            back.model.backend.embed(x).unwrap(),
            ck.model.backend.embed(x).unwrap()
        );
    }

    let bytes = ck.to_bytes();
    let cut = Checkpoint::from_bytes(&path, &bytes[..bytes.len() - 10], None);
    assert!(
        matches!(
            cut,
            Err(Error::Truncated { .. }) | Err(Error::Corrupt { .. })
        ),
        "{cut:?}"
    );
    let mut flipped = bytes.clone();
    flipped[0] ^= 0xff;
    assert!(matches!(
        Checkpoint::from_bytes(&path, &flipped, None),
        Err(Error::BadMagic { .. })
    ));
}

#[test]
fn epoch_log_follows_the_margin_schedule() {
    let dir = tempdir().unwrap();
    let data = small_data(dir.path());
    let cfg = RunConfig {
        epochs: 3,
        large_margin_epochs: 2,
        ..small_config()
    };
    let (_, log) = run(&cfg, &data);
    assert_eq!(log.len(), 5);
    for m in &log {
        let stage = if m.epoch < 3 {
            Stage::Main
        } else {
            Stage::LargeMargin
        };
        assert_eq!(m.stage, stage);
        assert_eq!((m.margin, m.penalty), cfg.margins.at(m.epoch, stage));
        assert!(m.loss.is_finite() && (0.0..=1.0).contains(&m.acc));
    }
    assert_eq!(log[0].margin, 0.0);
    assert_eq!(log[3].margin, cfg.margins.large_margin);
    assert_eq!(log[3].penalty, 0.0);
    assert_eq!(log[3].lr, cfg.lr_min);
}

#[test]
fn run_config_text_round_trip() {
    let mut cfg = small_config();
    cfg.set("mode", "softmax-sum").unwrap();
    cfg.set("seed", "17").unwrap();
    let back = RunConfig::from_text(&cfg.to_text(), "cfg").unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    assert_ne!(back.hash(), small_config().hash());
    assert!(matches!(cfg.set("no_such_key", "1"), Err(Error::Config(_))));
    assert!(RunConfig::from_text("seed = 1\nseed = 2\n", "cfg").is_err());
}

#[test]
fn first_adam_step_moves_by_the_learning_rate() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::vector(vec![1.0, -2.0, 3.0]), false);
    store.get_mut(p).grad = Tensor::vector(vec![0.5, -40.0, 1e-3]);
    let mut opt = OptimizerState::new(
        &store,
        AdamConfig {
            weight_decay: 0.0,
            eps: 0.0,
            ..AdamConfig::default()
        },
    );
    opt.step(&mut store, 0.1).unwrap();
    let got = store.value(p).data();
    for (g, w) in got.iter().zip([0.9, -1.9, 2.9]) {
        assert!((g - w).abs() < 1e-12, "{got:?}");
    }
    assert!(store.get(p).grad.data().iter().all(|&v| v == 0.0));
}

#[test]
fn weight_decay_is_decoupled_and_selective() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::vector(vec![2.0]), true);
    let b = store.add("b", Tensor::vector(vec![2.0]), false);
    let mut opt = OptimizerState::new(
        &store,
        AdamConfig {
            weight_decay: 0.5,
            ..AdamConfig::default()
        },
    );
    opt.step(&mut store, 0.1).unwrap();
    assert!((store.value(w).data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    assert_eq!(store.value(b).data()[0], 2.0);
}

#[test]
fn adam_descends_a_quadratic_bowl() {
    let curv = [0.1, 1.0, 10.0, 100.0];
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::vector(vec![3.0, -2.0, 1.0, -4.0]), false);
    let mut opt = OptimizerState::new(
        &store,
        AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        },
    );
    for _ in 0..3000 {
        let grad: Vec<f64> = store
            .value(p)
            .data()
            .iter()
            .zip(curv)
            .map(|(x, a)| a * x)
            .collect();
        store.get_mut(p).grad = Tensor::vector(grad);
        opt.step(&mut store, 0.01).unwrap();
    }
    let theta = store.value(p).data();
    assert!(theta.iter().all(|x| x.abs() < 1e-2), "{theta:?}");
}
