//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use fgssnet::dataset::Dataset;
use fgssnet::featx::FeatExConfig;
use fgssnet::nn::{Parameters, Scalar};
use fgssnet::raster::{BitMask, WallComponent};
use fgssnet::raster::Orientation;
use fgssnet::pipeline::CropTag;
use fgssnet::segmenter::{SegmenterConfig, Variant};
use fgssnet::synth::{generate_set, SynthSpec};
use fgssnet::train::{
    train_feature_extractor, train_segmenter, CheckpointManifest, EarlyStop, RunOptions, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 200 single-scale plans with a 2x2 room grid and thick walls: a toy
/// corpus a CPU can fit in minutes.
pub fn toy_spec() -> SynthSpec {
    SynthSpec {
        seed: 7,
        canvas_size: 320,
        room_grid: ((2, 2), (2, 2)),
        wall_width_range: (16, 30),
        ..Default::default()
    }
}

pub const TOY_PLANS: usize = 200;
pub const TOY_FEATX_EPOCHS: usize = 30;
pub const TOY_SEG_EPOCHS: usize = 40;
pub const TOY_SEG_BASE: usize = 4;
pub const TOY_SEG_TILE: usize = 128;

pub fn toy_featx_config() -> TrainConfig {
    TrainConfig {
        epochs: TOY_FEATX_EPOCHS,
        batch_size: 32,
        seed: 1,
        early_stop: EarlyStop {
            max_recon_mse: Some(0.05),
            min_width_within1: Some(0.8),
            min_val_iou: None,
        },
        ..TrainConfig::featx()
    }
}

pub fn toy_seg_config() -> TrainConfig {
    TrainConfig {
        epochs: TOY_SEG_EPOCHS,
        seed: 1,
        learning_rate: 0.001,
        val_every: 1,
        val_stride: 64,
        early_stop: EarlyStop {
            min_val_iou: Some(0.70),
            ..Default::default()
        },
        ..TrainConfig::segmenter()
    }
}

pub fn toy_seg_model() -> SegmenterConfig {
    SegmenterConfig::scaled(Variant::Fgss, TOY_SEG_BASE, TOY_SEG_TILE).unwrap()
}

/// Where the toy data and checkpoints live: `data/`, `models/featx/`,
/// `models/fgss-toy/`.
pub fn toy_root() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("toy")
}

pub struct ToyRun {
    pub data: Dataset,
    pub featx: CheckpointManifest,
    pub seg: CheckpointManifest,
    pub models_dir: PathBuf,
}

fn complete(dir: &Path) -> Option<CheckpointManifest> {
    CheckpointManifest::load(dir).ok().map(|(m, _)| m)
}

/// Generates the toy corpus and trains both phases. With `fresh` any
/// earlier run is discarded; otherwise finished checkpoints are reused.
pub fn toy_run(fresh: bool, log: &mut dyn FnMut(&str)) -> ToyRun {
    let root = toy_root();
    if fresh && root.exists() {
        std::fs::remove_dir_all(&root).unwrap();
    }
    let data_dir = root.join("data");
    if !data_dir.join("manifest.json").is_file() {
        generate_set(&toy_spec(), TOY_PLANS, &data_dir).unwrap();
    }
    let data = Dataset::open(&data_dir).unwrap();
    let models_dir = root.join("models");
    let featx_dir = models_dir.join("featx");
    let seg_dir = models_dir.join("fgss-toy");
    let featx = match complete(&featx_dir) {
        Some(m) => m,
        None => {
            std::fs::create_dir_all(&featx_dir).unwrap();
            let mut progress = |m: &fgssnet::train::EpochMetrics| log(&format!("featx {m:?}"));
            train_feature_extractor(
                &data,
                FeatExConfig::default(),
                &toy_featx_config(),
                &RunOptions::new(&featx_dir),
                &mut progress,
            )
            .unwrap()
        }
    };
    let seg = match complete(&seg_dir) {
        Some(m) => m,
        None => {
            std::fs::create_dir_all(&seg_dir).unwrap();
            let (fx, _) = fgssnet::train::load_featx(&featx_dir).unwrap();
            let mut progress = |m: &fgssnet::train::EpochMetrics| log(&format!("segmenter {m:?}"));
            train_segmenter(
                &data,
                toy_seg_model(),
                Some(fx),
                &toy_seg_config(),
                &RunOptions::new(&seg_dir),
                &mut progress,
            )
            .unwrap()
        }
    };
    ToyRun {
        data,
        featx,
        seg,
        models_dir,
    }
}

/// Outcome of a finite-difference comparison.
#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Gradients whose analytic and numeric magnitudes are both below this are
/// compared absolutely rather than relatively.
pub const GRAD_FLOOR: f64 = 1e-7;
/// Step of the five-point stencil. Larger steps cross ReLU kinks, smaller
/// ones drown gradients near 1e-7 in rounding noise of a loss of order 10.
pub const FD_STEP: f64 = 1e-5;

/// Compares the gradients accumulated by `backward` with five-point central
/// differences of `loss` on `samples` trainable scalars drawn uniformly.
/// Relative error is `|a - n| / max(|a|, |n|)`.
pub fn grad_check<M: Parameters<f64>>(
    model: &mut M,
    loss: &mut dyn FnMut(&mut M) -> f64,
    backward: &mut dyn FnMut(&mut M),
    samples: usize,
    seed: u64,
) -> GradCheck {
    model.zero_grad();
    backward(model);
    let slots: Vec<(String, usize, f64)> = model
        .named_params()
        .into_iter()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(name, p)| p.grad.iter().enumerate().map(move |(i, &g)| (name.clone(), i, g)).collect::<Vec<_>>())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheck {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for _ in 0..samples {
        let (name, i, analytic) = slots[rng.random_range(0..slots.len())].clone();
        let nudge = |m: &mut M, delta: f64| {
            let mut params = m.named_params_mut();
            let p = &mut params.iter_mut().find(|(n, _)| *n == name).unwrap().1;
            p.value[i] += f64::lit(delta);
        };
        let mut at = |k: f64| {
            nudge(model, k * FD_STEP);
            let v = loss(model);
            nudge(model, -k * FD_STEP);
            v
        };
        let (p2, p1, m1, m2) = (at(2.0), at(1.0), at(-1.0), at(-2.0));
        let numeric = (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * FD_STEP);
        let scale = analytic.abs().max(numeric.abs());
        let err = if scale < GRAD_FLOOR { 0.0 } else { (analytic - numeric).abs() / scale };
        report.checked += 1;
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = format!("{name}[{i}] analytic {analytic:e} numeric {numeric:e}");
        }
    }
    report
}

/// Adds `U(-scale, scale)` to every trainable scalar. Zero-initialised
/// biases otherwise leave ReLU inputs exactly on the kink wherever all
/// contributing activations are zero, and a central difference there is
/// not a derivative.
pub fn jitter_params<M: Parameters<f64>>(model: &mut M, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, p) in model.named_params_mut() {
        if p.trainable {
            p.value.iter_mut().for_each(|v| *v += rng.random_range(-scale..scale));
        }
    }
}

/// IoU by explicit counting over every pixel.
pub fn naive_iou(pred: &BitMask, truth: &BitMask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..truth.height() {
        for x in 0..truth.width() {
            let (p, t) = (pred.get(y, x), truth.get(y, x));
            if p && t {
                inter += 1;
            }
            if p || t {
                union += 1;
            }
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn orientation_of(tag: CropTag) -> Option<Orientation> {
    match tag {
        CropTag::LongestVertical | CropTag::ThinnestLongVertical => Some(Orientation::Vertical),
        CropTag::LongestHorizontal | CropTag::ThinnestLongHorizontal => Some(Orientation::Horizontal),
        CropTag::LongestOverall => None,
    }
}

/// `a` beats `b`: longer, then thinner, then higher, then further left.
fn beats(a: &WallComponent, b: &WallComponent) -> bool {
    let (ax, ay, _, _) = a.bounding_box;
    let (bx, by, _, _) = b.bounding_box;
    if a.length_px != b.length_px {
        return a.length_px > b.length_px;
    }
    if a.width_px != b.width_px {
        return a.width_px < b.width_px;
    }
    if ay != by {
        return ay < by;
    }
    ax < bx
}

/// The component a tag should select, found by checking every candidate
/// against every other. `None` if no unique winner exists.
pub fn ranking_oracle(tag: CropTag, components: &[WallComponent]) -> Option<usize> {
    let mut pool: Vec<&WallComponent> = match orientation_of(tag) {
        Some(o) => components.iter().filter(|c| c.orientation == o).collect(),
        None => components.iter().collect(),
    };
    if pool.is_empty() {
        pool = components.iter().collect();
    }
    if matches!(tag, CropTag::ThinnestLongVertical | CropTag::ThinnestLongHorizontal) {
        let mut thinnest = u32::MAX;
        for c in &pool {
            thinnest = thinnest.min(c.width_px);
        }
        pool.retain(|c| c.width_px <= thinnest + 1);
    }
    let winners: Vec<usize> = pool
        .iter()
        .filter(|a| pool.iter().all(|b| a.id == b.id || beats(a, b)))
        .map(|c| c.id)
        .collect();
    (winners.len() == 1).then(|| winners[0])
}

/// Deterministic pseudo-random values in `[lo, hi)`.
pub fn random_values(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}
