//! Acceptance gate: one PASS/FAIL line per criterion, tolerances pinned
//! below. Runs without the libtest harness so the lines always reach the
//! console; exits non-zero if any criterion fails.

mod common;

use std::path::Path;
use std::time::Instant;

use fgssnet::dataset::{Dataset, Split};
use fgssnet::eval::{evaluate_dataset, Ablation};
use fgssnet::featx::{FeatExConfig, FeatExLossWeights, FeatureExtractor, LatentBlock};
use fgssnet::infer::{segment_floorplan, segment_with_latent, stride_sweep, InferenceConfig, SweepItem};
use fgssnet::model::TileModel;
use fgssnet::nn::{Init, Tensor};
use fgssnet::pipeline::{select_wall_crops, CropTag};
use fgssnet::raster::{connected_components, iou, BitMask, Raster};
use fgssnet::segmenter::{
    count_parameters, shape_audit, SegLossWeights, Segmenter, SegmenterConfig, Variant,
};
use fgssnet::synth::{generate, generate_set, SynthSpec};
use fgssnet::train::{load_featx, load_model, prepare_plans, train_feature_extractor, train_segmenter, RunOptions, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

/// Parameter counts in millions and float32 MiB as published.
const TABLE: [(&str, f64, f64); 5] = [
    ("fgss16", 164.7, 628.42),
    ("fgss16-norec", 164.0, 625.46),
    ("fgss32", 603.6, 2302.46),
    ("fgss32-norec", 602.8, 2299.49),
    ("unet32", 553.7, 2119.49),
];
const PARAM_TOL: f64 = 0.10;
const MIB_TOL: f64 = 0.02;
const GRAD_TOL: f64 = 1e-3;
const GRAD_SAMPLES: usize = 100;
const TILED_TOL: f64 = 1e-5;
const CROP_PLANS: usize = 50;
const FEATX_MAX_MSE: f64 = 0.05;
const FEATX_MIN_WITHIN1: f64 = 0.80;
const SEG_MIN_IOU: f64 = 0.70;
const SWEEP_STRIDES: [usize; 3] = [10, 30, 120];
const SWEEP_PLANS: usize = 3;
const SWEEP_IOU_SLACK: f64 = 0.005;
const THREAD_TOL: f32 = 1e-5;

struct Gate {
    results: Vec<(String, bool)>,
}

impl Gate {
    fn check(&mut self, name: &str, pass: bool, detail: String) {
        println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.results.push((name.to_string(), pass));
    }
}

fn note(msg: &str) {
    println!("    {msg}");
}

fn main() {
    let start = Instant::now();
    let mut gate = Gate { results: Vec::new() };
    parameter_counts(&mut gate);
    mib_consistency(&mut gate);
    shapes(&mut gate);
    gradients(&mut gate);
    oracles(&mut gate);
    let toy = toy_training(&mut gate);
    sweep(&mut gate, &toy);
    determinism(&mut gate);
    let failed: Vec<&str> = gate.results.iter().filter(|r| !r.1).map(|r| r.0.as_str()).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.0} s",
        gate.results.len() - failed.len(),
        gate.results.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}

fn parameter_counts(gate: &mut Gate) {
    let mut pass = true;
    let mut worst: f64 = 0.0;
    for (name, millions, _) in TABLE {
        let r = count_parameters(&SegmenterConfig::named(name).unwrap()).unwrap();
        let rel = (r.total as f64 / 1e6 - millions).abs() / millions;
        worst = worst.max(rel);
        pass &= rel <= PARAM_TOL;
        note(&format!("{:<28} {:>12} vs {millions}M ({:+.3}%)", r.name, r.total, 100.0 * (r.total as f64 / 1e6 / millions - 1.0)));
    }
    gate.check(
        "parameter-count reproduction",
        pass,
        format!("worst relative deviation {:.4}% (tolerance {}%)", 100.0 * worst, 100.0 * PARAM_TOL),
    );
}

fn mib_consistency(gate: &mut Gate) {
    let mut pass = true;
    let mut worst: f64 = 0.0;
    for (name, _, mib) in TABLE {
        let r = count_parameters(&SegmenterConfig::named(name).unwrap()).unwrap();
        let computed = r.total as f64 * 4.0 / (1u64 << 20) as f64;
        assert_eq!(computed, r.mib);
        let rel = (computed - mib).abs() / mib;
        worst = worst.max(rel);
        pass &= rel <= MIB_TOL;
        note(&format!("{:<28} {computed:>9.2} MiB vs {mib} ({} MACs per tile)", r.name, r.macs));
    }
    gate.check(
        "MiB consistency",
        pass,
        format!("worst relative deviation {:.3}% (tolerance {}%)", 100.0 * worst, 100.0 * MIB_TOL),
    );
}

fn shapes(gate: &mut Gate) {
    let a = shape_audit(&SegmenterConfig::named("fgss16").unwrap()).unwrap();
    let pass = a.crop_latent == Some((256, 2)) && a.crop_set_latent == Some((1280, 2)) && a.fused == (3328, 2);
    gate.check(
        "shape audit",
        pass,
        format!(
            "crop latent {:?}, crop-set latent {:?}, fused bottleneck {:?} as (channels, side); expected (256, 2), (1280, 2), (3328, 2)",
            a.crop_latent, a.crop_set_latent, a.fused
        ),
    );
}

fn tensor(shape: [usize; 4], values: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, values)
}

fn gradients(gate: &mut Gate) {
    let mut reports = Vec::new();

    let cfg = FeatExConfig::miniature();
    let s = cfg.input_side;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut fx = FeatureExtractor::<f64>::new(cfg.clone(), &mut Init::Random(&mut rng)).unwrap();
    jitter_params(&mut fx, 0.05, 18);
    let crops = tensor([4, 1, s, s], random_values(4 * s * s, 12, 0.0, 1.0));
    let classes: Vec<usize> = (0..4).map(|i| (i * 3) % cfg.width_classes).collect();
    for (label, w) in [
        ("featx (w1 0.001, w2 10)", FeatExLossWeights::default()),
        ("featx (w1 1, w2 1)", FeatExLossWeights { w1: 1.0, w2: 1.0 }),
    ] {
        let r = grad_check(
            &mut fx,
            &mut |m| m.training_loss(&crops, &classes, w, &mut ChaCha8Rng::seed_from_u64(5)),
            &mut |m| {
                m.accumulate_gradients(&crops, &classes, w, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            },
            GRAD_SAMPLES,
            13,
        );
        reports.push((label, r));
    }

    let cfg = SegmenterConfig::miniature(Variant::Fgss);
    let t = cfg.tile_side;
    let (c, z) = (cfg.injected_channels(), cfg.latent_side());
    let mut seg = Segmenter::<f64>::new(cfg, &mut Init::Random(&mut rng)).unwrap();
    jitter_params(&mut seg, 0.05, 19);
    let tiles = tensor([2, 1, t, t], random_values(2 * t * t, 14, 0.0, 1.0));
    let masks = tensor([2, 1, t, t], random_values(2 * t * t, 15, 0.0, 1.0).into_iter().map(|v| (v > 0.6) as u8 as f64).collect());
    let injected = tensor([2, c, z, z], random_values(2 * c * z * z, 16, -1.0, 1.0));
    let w = SegLossWeights::default();
    let r = grad_check(
        &mut seg,
        &mut |m| m.training_loss(&tiles, &masks, Some(&injected), w).unwrap(),
        &mut |m| {
            m.accumulate_gradients(&tiles, &masks, Some(&injected), w).unwrap();
        },
        GRAD_SAMPLES,
        17,
    );
    reports.push(("segmenter (w3 1, w4 0.3)", r));

    let mut pass = true;
    for (label, r) in &reports {
        pass &= r.max_rel_err < GRAD_TOL && r.checked == GRAD_SAMPLES;
        note(&format!("{label}: {} params, max rel err {:.2e} ({})", r.checked, r.max_rel_err, r.worst));
    }
    let worst = reports.iter().map(|r| r.1.max_rel_err).fold(0.0, f64::max);
    gate.check(
        "gradient checks",
        pass,
        format!("max relative error {worst:.2e} over {} samples per loss (tolerance {GRAD_TOL:e}, f64, five-point stencil, step {FD_STEP:e})", GRAD_SAMPLES),
    );
}

/// Window origins along one axis: every multiple of `stride` that still
/// fits, plus the flush last window.
fn window_origins(len: usize, tile: usize, stride: usize) -> Vec<usize> {
    let padded = len.max(tile);
    let mut v: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o + tile <= padded).collect();
    if *v.last().unwrap() != padded - tile {
        v.push(padded - tile);
    }
    v
}

/// Per-pixel mean of the sigmoid over every covering window.
fn brute_force_probability(img: &Raster, model: &Segmenter<f32>, latent: &LatentBlock, stride: usize) -> Vec<f64> {
    let t = model.tile_side();
    let (h, w) = (img.height(), img.width());
    let ys = window_origins(h, t, stride);
    let xs = window_origins(w, t, stride);
    let mut windows = Vec::new();
    for &y0 in &ys {
        for &x0 in &xs {
            let tile = Raster::from_fn(t, t, |y, x| {
                let (gy, gx) = (y0 + y, x0 + x);
                if gy < h && gx < w { img.get(gy, gx) } else { 0.0 }
            });
            windows.push((y0, x0, model.tile_logits(&tile, Some(latent)).unwrap()));
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut sum, mut n) = (0.0, 0);
            for (y0, x0, logits) in &windows {
                if (*y0..y0 + t).contains(&y) && (*x0..x0 + t).contains(&x) {
                    let l = logits[(y - y0) * t + (x - x0)] as f64;
                    sum += 1.0 / (1.0 + (-l).exp());
                    n += 1;
                }
            }
            out[y * w + x] = sum / n as f64;
        }
    }
    out
}

fn oracles(gate: &mut Gate) {
    // (a) tiled inference
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = SegmenterConfig::miniature(Variant::Fgss);
    let (c, z) = (cfg.injected_channels(), cfg.latent_side());
    let seg = Segmenter::<f32>::new(cfg, &mut Init::Random(&mut rng)).unwrap();
    let latent = LatentBlock::new(c, z, random_values(c * z * z, 22, -1.0, 1.0).into_iter().map(|v| v as f32).collect()).unwrap();
    let img = Raster::new(300, 300, 1, random_values(300 * 300, 23, 0.0, 1.0).into_iter().map(|v| v as f32).collect()).unwrap();
    let mut tiled_err: f64 = 0.0;
    for stride in [7, 30] {
        let icfg = InferenceConfig {
            stride,
            tile_side: seg.tile_side(),
            ..Default::default()
        };
        let s = segment_with_latent(&img, Some(&latent), &seg, &icfg).unwrap();
        let oracle = brute_force_probability(&img, &seg, &latent, stride);
        let err = s
            .probability
            .data()
            .iter()
            .zip(&oracle)
            .map(|(&a, &b)| (a as f64 - b).abs())
            .fold(0.0, f64::max);
        note(&format!("(a) 300x300, tile {}, stride {stride}: {} tiles, max |diff| {err:.2e}", seg.tile_side(), s.tiles));
        tiled_err = tiled_err.max(err);
    }
    let a_pass = tiled_err < TILED_TOL;

    // (b) crop selection
    let spec = SynthSpec {
        diagonal_wall_prob: 0.0,
        ..Default::default()
    };
    let (mut agree, mut total, mut components) = (0, 0, 0);
    for i in 0..CROP_PLANS as u64 {
        let plan = generate(&SynthSpec { seed: 1000 + i, ..spec.clone() }).unwrap();
        let comps = connected_components(&plan.mask);
        components += comps.len();
        let set = select_wall_crops(&plan.image, &plan.mask).unwrap();
        for tag in CropTag::ALL {
            total += 1;
            if ranking_oracle(tag, &comps) == set.get(tag).component {
                agree += 1;
            }
        }
    }
    note(&format!("(b) {CROP_PLANS} plans, {components} components: {agree}/{total} tag selections agree"));
    let b_pass = agree == total;

    // (c) IoU
    let mut mismatches = 0;
    let cases = 40;
    for k in 0..cases {
        let (h, w) = (1 + k % 7 * 9, 1 + k % 5 * 13);
        let density = k as f64 / cases as f64;
        let bits = |rng: &mut ChaCha8Rng, d: f64| (0..h * w).map(|_| rng.random::<f64>() < d).collect();
        let p = BitMask::new(h, w, bits(&mut rng, density)).unwrap();
        let t = BitMask::new(h, w, bits(&mut rng, 1.0 - density)).unwrap();
        if iou(&p, &t).unwrap().to_bits() != naive_iou(&p, &t).to_bits() {
            mismatches += 1;
        }
    }
    let empty = BitMask::zeros(4, 4);
    if iou(&empty, &empty).unwrap() != naive_iou(&empty, &empty) {
        mismatches += 1;
    }
    note(&format!("(c) {} mask pairs, {mismatches} IoU mismatches", cases + 1));
    let c_pass = mismatches == 0;

    gate.check(
        "oracle equivalence",
        a_pass && b_pass && c_pass,
        format!(
            "(a) max |diff| {tiled_err:.2e} < {TILED_TOL:e}: {a_pass}; (b) {agree}/{total} exact: {b_pass}; (c) exact: {c_pass}"
        ),
    );
}

struct Toy {
    data: Dataset,
    seg_dir: std::path::PathBuf,
}

fn toy_training(gate: &mut Gate) -> Toy {
    let t0 = Instant::now();
    let run = toy_run(true, &mut |line| note(line));
    let fx_hit = run.featx.metric_history.iter().find(|m| {
        m.recon_mse.is_some_and(|v| v < FEATX_MAX_MSE) && m.width_within1.is_some_and(|v| v >= FEATX_MIN_WITHIN1)
    });
    let seg_hit = run
        .seg
        .metric_history
        .iter()
        .find(|m| m.val_iou.is_some_and(|v| v >= SEG_MIN_IOU));
    let fx_pass = fx_hit.is_some_and(|m| m.epoch < TOY_FEATX_EPOCHS);
    let seg_pass = seg_hit.is_some_and(|m| m.epoch < TOY_SEG_EPOCHS);
    let seg_dir = run.models_dir.join("fgss-toy");

    let (model, manifest) = load_model(&seg_dir).unwrap();
    let icfg = InferenceConfig {
        tile_side: model.tile_side(),
        ..Default::default()
    };
    let name = manifest.model_name();
    let real = evaluate_dataset(&run.data, Split::Test, &model, &name, &icfg, Ablation::None, 0).unwrap();
    let grey = evaluate_dataset(&run.data, Split::Test, &model, &name, &icfg, Ablation::Grey, 0).unwrap();
    note(&format!(
        "test split ({} plans, stride 30): real crops IoU {:.4}, grey crops IoU {:.4}, delta {:+.4} (reported, not gated)",
        real.per_floorplan.len(),
        real.mean_iou,
        grey.mean_iou,
        real.mean_iou - grey.mean_iou
    ));
    gate.check(
        "toy training",
        fx_pass && seg_pass,
        format!(
            "featx reached recon MSE < {FEATX_MAX_MSE} and ±1 px accuracy ≥ {FEATX_MIN_WITHIN1} at epoch {} (limit {TOY_FEATX_EPOCHS}): {:?}; \
             {name} reached val IoU ≥ {SEG_MIN_IOU} at epoch {} (limit {TOY_SEG_EPOCHS}): {:?}; grey-ablation delta {:+.4}; {:.0} s",
            fx_hit.map_or("-".into(), |m| (m.epoch + 1).to_string()),
            fx_hit.map(|m| (m.recon_mse.unwrap(), m.width_within1.unwrap())),
            seg_hit.map_or("-".into(), |m| (m.epoch + 1).to_string()),
            seg_hit.and_then(|m| m.val_iou),
            real.mean_iou - grey.mean_iou,
            t0.elapsed().as_secs_f64()
        ),
    );
    Toy {
        data: run.data,
        seg_dir,
    }
}

fn sweep(gate: &mut Gate, toy: &Toy) {
    let (model, _) = load_model(&toy.seg_dir).unwrap();
    let mut plans = prepare_plans(&toy.data, Split::Test, true).unwrap();
    plans.truncate(SWEEP_PLANS);
    let items: Vec<SweepItem<'_>> = plans
        .iter()
        .map(|p| SweepItem {
            image: &p.image,
            truth: &p.mask,
            crops: p.crops.as_ref(),
        })
        .collect();
    let base = InferenceConfig {
        tile_side: model.tile_side(),
        ..Default::default()
    };
    let rows = stride_sweep(&items, &model, &SWEEP_STRIDES, &base).unwrap();
    for r in &rows {
        note(&format!("stride {:>3}: {:>5} tiles, {:>8.0} ms, IoU {:.4}", r.stride, r.tiles, r.wall_clock_ms, r.mean_iou));
    }
    let decreasing = rows.windows(2).all(|w| w[1].wall_clock_ms < w[0].wall_clock_ms);
    let iou_ok = rows[1].mean_iou >= rows[2].mean_iou - SWEEP_IOU_SLACK;
    gate.check(
        "stride sweep",
        decreasing && iou_ok,
        format!(
            "wall-clock strictly decreasing over {SWEEP_STRIDES:?}: {decreasing}; IoU(30) {:.4} ≥ IoU(120) {:.4} - {SWEEP_IOU_SLACK}: {iou_ok}",
            rows[1].mean_iou, rows[2].mean_iou
        ),
    );
}

fn files_equal(a: &Path, b: &Path, rel: &str) -> bool {
    std::fs::read(a.join(rel)).unwrap() == std::fs::read(b.join(rel)).unwrap()
}

/// Generates, trains both phases for one epoch and segments, returning the
/// run directory and the probability raster.
fn small_pipeline(root: &Path) -> Raster {
    let spec = SynthSpec {
        seed: 3,
        ..toy_spec()
    };
    generate_set(&spec, 8, &root.join("data")).unwrap();
    let ds = Dataset::open(root.join("data")).unwrap();
    let fx_cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        ..TrainConfig::featx()
    };
    train_feature_extractor(&ds, FeatExConfig::default(), &fx_cfg, &RunOptions::new(&root.join("featx")), &mut |_| {}).unwrap();
    let (fx, _) = load_featx(&root.join("featx")).unwrap();
    let seg_cfg = TrainConfig {
        epochs: 1,
        batch_size: 4,
        learning_rate: 0.001,
        ..TrainConfig::segmenter()
    };
    let model_cfg = SegmenterConfig::scaled(Variant::Fgss, 2, 32).unwrap();
    train_segmenter(&ds, model_cfg, Some(fx), &seg_cfg, &RunOptions::new(&root.join("seg")), &mut |_| {}).unwrap();
    let (model, _) = load_model(&root.join("seg")).unwrap();
    let plan = &prepare_plans(&ds, Split::Test, true).unwrap()[0];
    let cfg = InferenceConfig {
        tile_side: model.tile_side(),
        parallel: false,
        ..Default::default()
    };
    segment_floorplan(&plan.image, plan.crops.as_ref(), &model, &cfg).unwrap().probability
}

fn determinism(gate: &mut Gate) {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let probs: Vec<Raster> = dirs.iter().map(|d| single.install(|| small_pipeline(d.path()))).collect();
    let (a, b) = (dirs[0].path(), dirs[1].path());

    let ds = Dataset::open(a.join("data")).unwrap();
    let gen_same = files_equal(a, b, "data/manifest.json")
        && ds.manifest.entries.iter().all(|e| files_equal(a, b, &format!("data/{}", e.image)) && files_equal(a, b, &format!("data/{}", e.mask)));
    let train_same = ["featx/best.fgss", "featx/last.fgss", "featx/metrics.csv", "seg/best.fgss", "seg/last.fgss", "seg/metrics.csv"]
        .iter()
        .all(|f| files_equal(a, b, f));
    let infer_same = probs[0] == probs[1];

    let (model, _) = load_model(&a.join("seg")).unwrap();
    let plan = &prepare_plans(&ds, Split::Test, true).unwrap()[0];
    let multi = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let cfg = InferenceConfig {
        tile_side: model.tile_side(),
        parallel: true,
        ..Default::default()
    };
    let par = multi.install(|| segment_floorplan(&plan.image, plan.crops.as_ref(), &model, &cfg).unwrap());
    let thread_err = par
        .probability
        .data()
        .iter()
        .zip(probs[0].data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f32, f32::max);
    gate.check(
        "determinism",
        gen_same && train_same && infer_same && thread_err <= THREAD_TOL,
        format!(
            "single-threaded repeat: gen identical {gen_same}, train archives identical {train_same}, inference identical {infer_same}; \
             4-thread vs 1-thread inference max |diff| {thread_err:e} (tolerance {THREAD_TOL:e})"
        ),
    );
}
