//! Command-level flow on a tiny synthetic dataset: generate, train, test,
//! evaluate and compare, plus the failure modes that cross command boundaries.

use std::path::{Path, PathBuf};

use gravitynet::checkpoint;
use gravitynet::config::{Profile, TrainConfig};
use gravitynet::data::SyntheticSpec;
use gravitynet::inference::read_detections;
use gravitynet::pipeline::{self, Subset, TestOptions};
use gravitynet::train::{BEST_CHECKPOINT, CONFIG_FILE, LAST_CHECKPOINT, REPORT_FILE};
use gravitynet::Error;

fn small_spec(size: usize) -> SyntheticSpec {
    SyntheticSpec {
        image_count: 12,
        image_size: (size, size),
        lesions_per_image: (1, 3),
        distractor_count: (0, 1),
        ..SyntheticSpec::default()
    }
}

fn small_config(run: &Path) -> TrainConfig {
    let mut cfg = TrainConfig::for_profile(Profile::Desk);
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.checkpoint_dir = run.to_path_buf();
    cfg
}

fn trained(dir: &Path, name: &str) -> (PathBuf, TrainConfig) {
    let data = dir.join("data");
    if !data.exists() {
        pipeline::cmd_synth(&small_spec(64), &data).unwrap();
    }
    let cfg = small_config(&dir.join(name));
    pipeline::cmd_train(&cfg, &data).unwrap();
    (data, cfg)
}

#[test]
fn full_flow_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = trained(dir.path(), "run");
    for f in [BEST_CHECKPOINT, LAST_CHECKPOINT, CONFIG_FILE, REPORT_FILE] {
        assert!(cfg.checkpoint_dir.join(f).is_file(), "{f} missing");
    }
    // the persisted record alone is enough to relaunch the run
    let saved = std::fs::read_to_string(cfg.checkpoint_dir.join(CONFIG_FILE)).unwrap();
    assert_eq!(TrainConfig::from_toml(&saved).unwrap(), cfg);

    let dets = dir.path().join("dets.csv");
    let options = TestOptions {
        subset: Subset::Test,
        inference: None,
    };
    let summary = pipeline::cmd_test(&cfg.checkpoint_dir.join(BEST_CHECKPOINT), &data, &options, &dets).unwrap();
    assert_eq!(summary.images, 6);
    assert_eq!(read_detections(&dets).unwrap().len(), summary.detections);

    let eval_dir = dir.path().join("eval");
    let (eval, curve) = pipeline::cmd_eval(&dets, &data, &cfg, Subset::Test, &eval_dir).unwrap();
    assert_eq!(eval.images, 6);
    assert!((0.0..=1.0).contains(&eval.aufc));
    assert!(!curve.points.is_empty());
    for f in [pipeline::FROC_CSV, pipeline::FROC_PLOT, pipeline::METRICS_FILE] {
        assert!(eval_dir.join(f).is_file(), "{f} missing");
    }

    let cmp_dir = dir.path().join("cmp");
    let report = pipeline::cmd_compare(&dets, &dets, &data, &cfg, Subset::Test, &cmp_dir).unwrap();
    assert_eq!(report.result.p_value, 1.0);
    assert_eq!(report.verdict(), "not significant");
    for f in [
        pipeline::COMPARISON_JSON,
        pipeline::COMPARISON_TEXT,
        pipeline::AVERAGED_CSV,
        pipeline::AVERAGED_PLOT,
    ] {
        assert!(cmp_dir.join(f).is_file(), "{f} missing");
    }
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (_, a) = trained(dir.path(), "a");
    let (_, b) = trained(dir.path(), "b");
    let load = |cfg: &TrainConfig| checkpoint::load(&cfg.checkpoint_dir.join(BEST_CHECKPOINT)).unwrap();
    let (mut ca, cb) = (load(&a), load(&b));
    // the runs differ only in where they were written
    ca.header.config.checkpoint_dir = cb.header.config.checkpoint_dir.clone();
    assert_eq!(ca.header, cb.header);
    let weights = |c: &checkpoint::Checkpoint| -> Vec<Vec<f32>> { c.model.params().iter().map(|p| p.value.clone()).collect() };
    assert!(weights(&ca) == weights(&cb));

    let report = |cfg: &TrainConfig| {
        let bytes = std::fs::read(cfg.checkpoint_dir.join(REPORT_FILE)).unwrap();
        let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        // wall-clock fields are the only other difference
        v["timing"] = serde_json::Value::Null;
        v["config"]["checkpoint_dir"] = serde_json::Value::Null;
        for e in v["epochs"].as_array_mut().unwrap() {
            e["seconds"] = serde_json::Value::Null;
        }
        v
    };
    assert_eq!(report(&a), report(&b));
}

#[test]
fn checkpoint_rejects_images_of_another_size() {
    let dir = tempfile::tempdir().unwrap();
    let small = dir.path().join("small");
    let large = dir.path().join("large");
    pipeline::cmd_synth(&small_spec(64), &small).unwrap();
    pipeline::cmd_synth(&small_spec(96), &large).unwrap();
    let ckpt = dir.path().join("init.ckpt");
    pipeline::cmd_init(&small_config(&dir.path().join("run")), &small, &ckpt).unwrap();
    let options = TestOptions {
        subset: Subset::All,
        inference: None,
    };
    let ok = pipeline::cmd_test(&ckpt, &small, &options, &dir.path().join("ok.csv")).unwrap();
    assert_eq!(ok.images, 12);
    let err = pipeline::cmd_test(&ckpt, &large, &options, &dir.path().join("bad.csv")).unwrap_err();
    assert!(matches!(err, Error::ConfigurationMismatch(_)), "{err}");
}

#[test]
fn comparison_needs_matching_image_sets() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    pipeline::cmd_synth(&small_spec(64), &data).unwrap();
    let dets = dir.path().join("dets.csv");
    std::fs::write(&dets, "image_id,x,y,score\nnot_an_image,1.0,1.0,0.5\n").unwrap();
    let cfg = small_config(&dir.path().join("run"));
    let err = pipeline::cmd_compare(&dets, &dets, &data, &cfg, Subset::All, &dir.path().join("cmp")).unwrap_err();
    assert!(matches!(err, Error::InvalidComparison(_)), "{err}");
}
