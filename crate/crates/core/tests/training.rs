use std::path::Path;

use mdt_core::checkpoint::Checkpoint;
use mdt_core::model::{AblationMode, ModelConfig};
use mdt_core::syndata::DataConfig;
use mdt_core::train::{evaluate, mean_loss, train, Dataset, Loaded, OptimConfig, PathsConfig, RunConfig, TrainConfig};
use mdt_core::vocab::Vocab;
use mdt_core::{Error, Model};

fn small_data(dir: &Path, n_train: usize) -> Dataset {
    let cfg = DataConfig {
        n_train,
        n_val: 6,
        n_test: 6,
        feature_dim: 16,
        patches: 4,
        ..DataConfig::default()
    };
    Dataset::generate(&cfg, dir).unwrap()
}

fn run_config(out: &Path, mode: AblationMode, epochs: usize) -> RunConfig {
    RunConfig {
        model: ModelConfig {
            d_model: 16,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            memory_slots: 2,
            feature_dim: 16,
            mode,
            ..ModelConfig::default()
        },
        optim: OptimConfig {
            lr_visual: 1e-3,
            lr_other: 2e-3,
            decay: 0.95,
            ..OptimConfig::default()
        },
        train: TrainConfig {
            epochs,
            batch_size: 8,
            seed: 3,
            ..TrainConfig::default()
        },
        paths: PathsConfig {
            data_dir: out.join("data"),
            out_dir: out.join("run"),
        },
        ..RunConfig::default()
    }
}

#[test]
fn fifty_samples_overfit_within_thirty_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(&dir.path().join("data"), 50);
    let cfg = run_config(dir.path(), AblationMode::Full, 30);
    let model_cfg = mdt_core::train::resolve_model_config(&cfg.model, &data.vocab).unwrap();
    let (model, store) = Model::init(&model_cfg, cfg.train.seed).unwrap();
    let initial = mean_loss(&model, &store, &data.train).unwrap();
    let outcome = train(&cfg, &data, None).unwrap();
    let last = Checkpoint::load(&cfg.paths.out_dir.join("epoch_30.ckpt")).unwrap();
    let trained = Model::bind(&model_cfg, &last.params).unwrap();
    let final_loss = mean_loss(&trained, &last.params, &data.train).unwrap();
    assert!(final_loss < 0.1 * initial, "{initial} -> {final_loss}");
    assert_eq!(outcome.history.len(), 30);
    let lr = outcome.history[2].lr_other;
    assert!((lr - 2e-3 * 0.95f64.powi(2)).abs() < 1e-15);
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(&dir.path().join("data"), 24);
    let straight = run_config(&dir.path().join("a"), AblationMode::Full, 4);
    let full = train(&straight, &data, None).unwrap();

    let first = run_config(&dir.path().join("b"), AblationMode::Full, 2);
    train(&first, &data, None).unwrap();
    let resumed_cfg = run_config(&dir.path().join("b"), AblationMode::Full, 4);
    let resumed = train(&resumed_cfg, &data, Some(&first.paths.out_dir.join("epoch_2.ckpt"))).unwrap();

    assert_eq!(full.history, resumed.history);
    for name in ["epoch_4.ckpt", "best.ckpt", "loss.tsv"] {
        let a = std::fs::read(straight.paths.out_dir.join(name)).unwrap();
        let b = std::fs::read(resumed_cfg.paths.out_dir.join(name)).unwrap();
        assert!(a == b, "{name} differs");
    }
}

#[test]
fn identical_runs_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(&dir.path().join("data"), 16);
    let mut reports = Vec::new();
    for run in ["x", "y"] {
        let cfg = run_config(&dir.path().join(run), AblationMode::BaseRm, 2);
        let out = train(&cfg, &data, None).unwrap();
        let loaded = Loaded::from_checkpoint(&out.best_checkpoint).unwrap();
        evaluate(&loaded, &data.test, &cfg.decode, None, &cfg.paths.out_dir.join("test")).unwrap();
        reports.push(cfg.paths.out_dir);
    }
    for name in [
        "epoch_1.ckpt",
        "epoch_2.ckpt",
        "best.ckpt",
        "loss.tsv",
        "test/metrics.json",
        "test/metrics.txt",
        "test/generations.jsonl",
    ] {
        let a = std::fs::read(reports[0].join(name)).unwrap();
        let b = std::fs::read(reports[1].join(name)).unwrap();
        assert!(a == b, "{name} differs");
    }
}

#[test]
fn diverging_batch_is_dumped() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = small_data(&dir.path().join("data"), 8);
    data.train[5].sample.features.data_mut()[0] = f64::NAN;
    let cfg = run_config(dir.path(), AblationMode::Base, 1);
    let err = train(&cfg, &data, None).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let dump = std::fs::read_to_string(cfg.paths.out_dir.join("nan_dump.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&dump).unwrap();
    let ids: Vec<u64> = v["sample_ids"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect();
    assert!(ids.contains(&data.train[5].sample.id));
}

#[test]
fn checkpoint_vocabulary_must_match_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(&dir.path().join("data"), 8);
    let cfg = run_config(dir.path(), AblationMode::Base, 1);
    let out = train(&cfg, &data, None).unwrap();
    let loaded = Loaded::from_checkpoint(&out.best_checkpoint).unwrap();
    assert!(loaded.check_vocab(&data.vocab).is_ok());
    let other = Vocab::build(["alpha", "beta"]);
    assert!(matches!(loaded.check_vocab(&other), Err(Error::Vocab(_))));
    let loaded_again = Dataset::load(&cfg.paths.data_dir, Some(16)).unwrap();
    assert_eq!(loaded_again.vocab, data.vocab);
    assert!(matches!(Dataset::load(&cfg.paths.data_dir, Some(32)), Err(Error::Parse { .. })));
}
