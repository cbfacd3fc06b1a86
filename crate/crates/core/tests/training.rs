mod common;

use std::path::Path;

use fgssnet::dataset::Dataset;
use fgssnet::featx::FeatExConfig;
use fgssnet::model::TileModel;
use fgssnet::segmenter::{SegmenterConfig, Variant};
use fgssnet::synth::{generate_set, SynthSpec};
use fgssnet::train::{
    load_model, train_feature_extractor, train_segmenter, CheckpointManifest, RunOptions, TrainConfig,
};

use common::toy_spec;

fn small_set(dir: &Path, count: usize) -> Dataset {
    let spec = SynthSpec {
        seed: 21,
        ..toy_spec()
    };
    generate_set(&spec, count, dir).unwrap();
    Dataset::open(dir).unwrap()
}

fn tiny_unet() -> SegmenterConfig {
    SegmenterConfig::scaled(Variant::Unet, 2, 32).unwrap()
}

fn seg_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        learning_rate: 0.001,
        tiles_per_plan: 2,
        ..TrainConfig::segmenter()
    }
}

#[test]
fn featx_smoke_one_epoch_one_row() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = small_set(&tmp.path().join("data"), 10);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 16,
        ..TrainConfig::featx()
    };
    let out = tmp.path().join("featx");
    let m = train_feature_extractor(&ds, FeatExConfig::default(), &cfg, &RunOptions::new(&out), &mut |_| {}).unwrap();
    assert_eq!(m.metric_history.len(), 1);
    assert!(m.metric_history[0].train_loss.is_finite());
    assert!(m.metric_history[0].recon_mse.is_some());

    let (reloaded, _) = CheckpointManifest::load(&out).unwrap();
    assert_eq!(reloaded, m);
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn unet_trains_without_a_feature_extractor() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = small_set(&tmp.path().join("data"), 10);
    let out = tmp.path().join("unet");
    let m = train_segmenter(&ds, tiny_unet(), None, &seg_config(1), &RunOptions::new(&out), &mut |_| {}).unwrap();
    assert_eq!(m.metric_history.len(), 1);
    assert!(m.metric_history[0].val_iou.is_some_and(|v| (0.0..=1.0).contains(&v)));
    assert!(m.config_snapshot.featx.is_none());
    let (model, _) = load_model(&out).unwrap();
    assert!(!model.requires_crops());
}

#[test]
fn fgss_without_extractor_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = small_set(&tmp.path().join("data"), 4);
    let cfg = SegmenterConfig::scaled(Variant::Fgss, 2, 32).unwrap();
    let err = train_segmenter(&ds, cfg, None, &seg_config(1), &RunOptions::new(&tmp.path().join("s")), &mut |_| {});
    assert!(err.is_err());
}

#[test]
fn resume_continues_the_same_trajectory() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = small_set(&tmp.path().join("data"), 10);
    let cfg = seg_config(2);

    let straight = tmp.path().join("straight");
    let full = train_segmenter(&ds, tiny_unet(), None, &cfg, &RunOptions::new(&straight), &mut |_| {}).unwrap();

    let split = tmp.path().join("split");
    let first = RunOptions {
        max_new_epochs: Some(1),
        ..RunOptions::new(&split)
    };
    let half = train_segmenter(&ds, tiny_unet(), None, &cfg, &first, &mut |_| {}).unwrap();
    assert_eq!(half.epoch, 1);
    let again = RunOptions {
        resume: true,
        ..RunOptions::new(&split)
    };
    let resumed = train_segmenter(&ds, tiny_unet(), None, &cfg, &again, &mut |_| {}).unwrap();

    assert_eq!(resumed.epoch, 2);
    assert_eq!(resumed.optimizer_steps, full.optimizer_steps);
    let (a, b) = (&full.metric_history[1], &resumed.metric_history[1]);
    assert!((a.train_loss - b.train_loss).abs() < 1e-6, "{} vs {}", a.train_loss, b.train_loss);
    assert!((a.val_iou.unwrap() - b.val_iou.unwrap()).abs() < 1e-6);
}

#[test]
fn resume_refuses_a_different_configuration() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = small_set(&tmp.path().join("data"), 4);
    let out = tmp.path().join("run");
    train_segmenter(&ds, tiny_unet(), None, &seg_config(1), &RunOptions::new(&out), &mut |_| {}).unwrap();
    let other = TrainConfig {
        learning_rate: 0.01,
        ..seg_config(2)
    };
    let opts = RunOptions {
        resume: true,
        ..RunOptions::new(&out)
    };
    assert!(train_segmenter(&ds, tiny_unet(), None, &other, &opts, &mut |_| {}).is_err());
}
