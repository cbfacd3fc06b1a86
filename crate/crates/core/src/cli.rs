//! The `fgss` command line. Every run prints JSON lines on standard output,
//! the first of which is the resolved configuration.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{
    audit_models, evaluate_dataset, export_latents, split_crops, width_deviation_histogram, Ablation, AUDIT_VARIANTS,
};
use crate::featx::{FeatExConfig, FeatExLossWeights};
use crate::infer::{overlay, segment_floorplan, stride_sweep, InferenceConfig, SweepItem};
use crate::model::TileModel;
use crate::pipeline::{normalize_by_annotated_widths, CropSidecar, WallCropSet};
use crate::raster::{read_image, resize, resize_mask, write_mask, write_png, Resample};
use crate::segmenter::{SegLossWeights, SegmenterConfig, Variant};
use crate::synth::{generate_set, SynthSpec};
use crate::train::{
    load_featx, load_model, prepare_plans, train_feature_extractor, train_segmenter, EarlyStop, LossWeights,
    RunOptions, TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "fgss", version, about = "Floorplan wall segmentation with feature-guided U-Nets")]
pub struct Cli {
    /// Worker threads; 1 forces the deterministic single-threaded mode.
    /// Falls back to FGSS_THREADS.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic floorplan dataset.
    Gen(GenArgs),
    /// Train the wall-crop feature extractor.
    TrainFeatx(TrainFeatxArgs),
    /// Train a segmenter.
    Train(TrainArgs),
    /// Segment one floorplan image.
    Infer(InferArgs),
    /// IoU over a dataset split.
    Eval(EvalArgs),
    /// IoU and wall-clock time over a list of window strides.
    Sweep(SweepArgs),
    /// Parameter counts, float32 size and FLOPs of the named variants.
    Audit(AuditArgs),
    /// Width-prediction deviation histogram of a feature extractor.
    Widths(WidthsArgs),
    /// Export per-crop extractor latents as CSV.
    Latents(LatentsArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 768)]
    pub canvas: usize,
    #[arg(long, default_value_t = 6)]
    pub min_width: usize,
    #[arg(long, default_value_t = 30)]
    pub max_width: usize,
    #[arg(long, default_value_t = 2)]
    pub min_rooms: usize,
    #[arg(long, default_value_t = 4)]
    pub max_rooms: usize,
    #[arg(long, default_value_t = 0.1)]
    pub diagonal_prob: f64,
}

#[derive(Args, Debug)]
pub struct CommonTrain {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Learning-rate factor applied every `--decay-every` epochs.
    #[arg(long, default_value_t = 0.9)]
    pub decay: f64,
    #[arg(long, default_value_t = 10)]
    pub decay_every: usize,
    /// Continue an interrupted run in `--out`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Debug)]
pub struct TrainFeatxArgs {
    #[command(flatten)]
    pub common: CommonTrain,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.001)]
    pub w1: f64,
    #[arg(long, default_value_t = 10.0)]
    pub w2: f64,
    /// Stop once validation reconstruction MSE is below this...
    #[arg(long)]
    pub stop_recon_mse: Option<f64>,
    /// ...and the ±1 px width accuracy is at least this.
    #[arg(long)]
    pub stop_within1: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonTrain,
    /// Feature-extractor checkpoint (required for fgss variants).
    #[arg(long)]
    pub featx: Option<PathBuf>,
    #[arg(long, value_parser = ["fgss16", "fgss32", "unet16", "unet32"])]
    pub variant: String,
    #[arg(long)]
    pub no_rec: bool,
    /// Override the base channel count (toy runs).
    #[arg(long)]
    pub base: Option<usize>,
    /// Override the tile side; stages follow so the bottleneck stays 2x2.
    #[arg(long)]
    pub tile: Option<usize>,
    #[arg(long, default_value_t = 120)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.0001)]
    pub lr: f64,
    #[arg(long, default_value_t = 12)]
    pub batch: usize,
    #[arg(long, default_value_t = 1.0)]
    pub w3: f64,
    #[arg(long, default_value_t = 0.3)]
    pub w4: f64,
    #[arg(long, default_value_t = 4)]
    pub tiles_per_plan: usize,
    #[arg(long, default_value_t = 1)]
    pub val_every: usize,
    #[arg(long, default_value_t = 30)]
    pub val_stride: usize,
    /// Also train the feature-extractor encoder.
    #[arg(long)]
    pub unfreeze_featx: bool,
    /// Stop once validation IoU reaches this.
    #[arg(long)]
    pub stop_iou: Option<f64>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Crop sidecar JSON (five boxes with annotated widths, original
    /// coordinates). Required for fgss checkpoints.
    #[arg(long)]
    pub crops: Option<PathBuf>,
    /// Rescale factor when no crops are given (image assumed normalized).
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long, default_value_t = 30)]
    pub stride: usize,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value = "none")]
    pub ablation: Ablation,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for mask.png and probability.png.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value = "none")]
    pub ablation: Ablation,
    #[arg(long, default_value_t = 30)]
    pub stride: usize,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON report path; a CSV with the same stem is written beside it.
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "10,20,30,40,60,120")]
    pub strides: Vec<usize>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Use only the first N floorplans of the split.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Optional CSV output.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AuditArgs {
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
}

#[derive(Args, Debug)]
pub struct WidthsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct LatentsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Checkpoint directory; falls back to FGSS_MODELS_DIR.
    #[arg(long)]
    pub models_dir: Option<PathBuf>,
    /// Session artifact directory (a temporary one by default).
    #[arg(long)]
    pub work_dir: Option<PathBuf>,
}

/// A failure that maps to an exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn log(v: Value) {
    println!("{v}");
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let threads = cli
        .threads
        .or_else(|| std::env::var("FGSS_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(n) = threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return EXIT_USAGE;
        }
        // Fails only if a pool already exists (repeated in-process calls).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let deterministic = threads == Some(1);
    match dispatch(cli.command, threads, deterministic) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn dispatch(cmd: Command, threads: Option<usize>, deterministic: bool) -> std::result::Result<(), Failure> {
    match cmd {
        Command::Gen(a) => gen(a, threads),
        Command::TrainFeatx(a) => train_featx_cmd(a, threads),
        Command::Train(a) => train_cmd(a, threads),
        Command::Infer(a) => infer_cmd(a, threads, deterministic),
        Command::Eval(a) => eval_cmd(a, threads, deterministic),
        Command::Sweep(a) => sweep_cmd(a, threads, deterministic),
        Command::Audit(a) => audit_cmd(a),
        Command::Widths(a) => widths_cmd(a, threads),
        Command::Latents(a) => latents_cmd(a, threads),
        Command::Serve(a) => serve_cmd(a, threads),
    }
}

fn gen(a: GenArgs, threads: Option<usize>) -> std::result::Result<(), Failure> {
    let spec = SynthSpec {
        seed: a.seed,
        canvas_size: a.canvas,
        room_grid: ((a.min_rooms, a.max_rooms), (a.min_rooms, a.max_rooms)),
        wall_width_range: (a.min_width, a.max_width),
        diagonal_wall_prob: a.diagonal_prob,
        ..Default::default()
    };
    log(json!({"event": "config", "command": "gen", "threads": threads, "count": a.count,
               "out": a.out, "spec": spec}));
    let m = generate_set(&spec, a.count, &a.out)?;
    log(json!({"event": "done", "samples": m.entries.len(),
               "splits": {"train": m.splits.train.len(), "val": m.splits.val.len(), "test": m.splits.test.len()}}));
    Ok(())
}

fn epoch_logger() -> impl FnMut(&crate::train::EpochMetrics) {
    |m| log(json!({"event": "epoch", "metrics": m}))
}

fn train_featx_cmd(a: TrainFeatxArgs, threads: Option<usize>) -> std::result::Result<(), Failure> {
    let config = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        batch_size: a.batch,
        decay_factor: a.common.decay,
        decay_every: a.common.decay_every,
        seed: a.common.seed,
        loss_weights: LossWeights::FeatEx(FeatExLossWeights { w1: a.w1, w2: a.w2 }),
        early_stop: EarlyStop {
            max_recon_mse: a.stop_recon_mse,
            min_width_within1: a.stop_within1,
            min_val_iou: None,
        },
        ..TrainConfig::featx()
    };
    let featx = FeatExConfig::default();
    log(json!({"event": "config", "command": "train-featx", "threads": threads, "data": a.common.data,
               "out": a.common.out, "resume": a.common.resume, "train": config, "featx": featx}));
    config.validate()?;
    let ds = Dataset::open(&a.common.data)?;
    let opts = RunOptions {
        resume: a.common.resume,
        ..RunOptions::new(&a.common.out)
    };
    let m = train_feature_extractor(&ds, featx, &config, &opts, &mut epoch_logger())?;
    log(json!({"event": "done", "epochs": m.epoch, "bestEpoch": m.best_epoch, "manifest": a.common.out.join(crate::train::MANIFEST_FILE)}));
    Ok(())
}

fn train_cmd(a: TrainArgs, threads: Option<usize>) -> std::result::Result<(), Failure> {
    let mut seg = SegmenterConfig::named(&a.variant)?;
    if a.base.is_some() || a.tile.is_some() {
        seg = SegmenterConfig::scaled(
            seg.variant,
            a.base.unwrap_or(seg.base_channels),
            a.tile.unwrap_or(seg.tile_side),
        )?;
    }
    if a.no_rec {
        if seg.variant == Variant::Unet {
            return Err(Failure::Usage("--no-rec applies to fgss variants only".into()));
        }
        seg = seg.without_reconstruction();
    }
    let config = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        batch_size: a.batch,
        decay_factor: a.common.decay,
        decay_every: a.common.decay_every,
        seed: a.common.seed,
        loss_weights: LossWeights::Seg(SegLossWeights { w3: a.w3, w4: a.w4 }),
        tiles_per_plan: a.tiles_per_plan,
        val_every: a.val_every,
        val_stride: a.val_stride,
        freeze_featx: !a.unfreeze_featx,
        early_stop: EarlyStop {
            min_val_iou: a.stop_iou,
            ..Default::default()
        },
        ..TrainConfig::segmenter()
    };
    log(json!({"event": "config", "command": "train", "threads": threads, "data": a.common.data,
               "out": a.common.out, "featx": a.featx, "resume": a.common.resume, "train": config, "segmenter": seg}));
    config.validate()?;
    let featx = match (seg.variant, &a.featx) {
        (Variant::Fgss, None) => {
            return Err(Failure::Usage(format!("--featx is required for the {} variant", a.variant)))
        }
        (Variant::Fgss, Some(p)) => Some(load_featx(p)?.0),
        (Variant::Unet, _) => None,
    };
    let ds = Dataset::open(&a.common.data)?;
    let opts = RunOptions {
        resume: a.common.resume,
        ..RunOptions::new(&a.common.out)
    };
    let m = train_segmenter(&ds, seg, featx, &config, &opts, &mut epoch_logger())?;
    log(json!({"event": "done", "epochs": m.epoch, "bestEpoch": m.best_epoch, "manifest": a.common.out.join(crate::train::MANIFEST_FILE)}));
    Ok(())
}

fn inference_config(model: &dyn TileModel, stride: usize, threshold: f64, deterministic: bool) -> InferenceConfig {
    InferenceConfig {
        stride,
        threshold,
        tile_side: model.tile_side(),
        parallel: !deterministic,
    }
}

fn read_sidecar(path: &Path) -> Result<CropSidecar> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn infer_cmd(a: InferArgs, threads: Option<usize>, deterministic: bool) -> std::result::Result<(), Failure> {
    log(json!({"event": "config", "command": "infer", "threads": threads, "image": a.image, "ckpt": a.ckpt,
               "crops": a.crops, "scale": a.scale, "stride": a.stride, "threshold": a.threshold,
               "ablation": a.ablation, "seed": a.seed, "out": a.out}));
    let (model, manifest) = load_model(&a.ckpt)?;
    if model.requires_crops() && a.crops.is_none() {
        return Err(Failure::Usage(format!(
            "--crops is required: {} is an fgss checkpoint",
            manifest.model_name()
        )));
    }
    let original = read_image(&a.image)?;
    let (image, crops, scale) = match &a.crops {
        Some(p) => {
            let sidecar = read_sidecar(p)?;
            let (img, norm) = normalize_by_annotated_widths(&original, &sidecar.widths())?;
            let set = WallCropSet::from_sidecar(&img, &sidecar, norm.scale_factor)?;
            (img, Some(set), norm.scale_factor)
        }
        None => {
            let s = a.scale.unwrap_or(1.0);
            (crate::raster::rescale(&original, s, Resample::Bilinear)?, None, s)
        }
    };
    let crops = match (crops, a.ablation) {
        (Some(c), Ablation::Grey) => Some(crate::eval::grey_crop_set(&c, a.seed, 0)?),
        (c, _) => c,
    };
    let cfg = inference_config(&model, a.stride, a.threshold, deterministic);
    let start = std::time::Instant::now();
    let seg = segment_floorplan(&image, crops.as_ref(), &model, &cfg)?;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    let (h, w) = (original.height(), original.width());
    let mask = resize_mask(&seg.mask, h, w)?;
    let prob = resize(&seg.probability, h, w, Resample::Bilinear)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::file(&a.out, e))?;
    write_mask(&mask, a.out.join("mask.png"))?;
    let pp = a.out.join("probability.png");
    write_png(&prob, &pp)?;
    write_png(&overlay(&original, &mask)?, a.out.join("overlay.png"))?;
    log(json!({"event": "done", "scaleFactor": scale, "tiles": seg.tiles, "ms": ms,
               "wallPixels": mask.count(), "mask": a.out.join("mask.png"), "probability": pp}));
    Ok(())
}

fn eval_cmd(a: EvalArgs, threads: Option<usize>, deterministic: bool) -> std::result::Result<(), Failure> {
    log(json!({"event": "config", "command": "eval", "threads": threads, "data": a.data, "ckpt": a.ckpt,
               "split": a.split, "ablation": a.ablation, "stride": a.stride, "threshold": a.threshold,
               "seed": a.seed, "report": a.report}));
    let (model, manifest) = load_model(&a.ckpt)?;
    let ds = Dataset::open(&a.data)?;
    let cfg = inference_config(&model, a.stride, a.threshold, deterministic);
    let r = evaluate_dataset(&ds, a.split, &model, &manifest.model_name(), &cfg, a.ablation, a.seed)?;
    r.write_json(&a.report)?;
    r.write_csv(&a.report.with_extension("csv"))?;
    log(json!({"event": "done", "meanIou": r.mean_iou, "floorplans": r.per_floorplan.len(), "ms": r.total_ms}));
    Ok(())
}

fn sweep_cmd(a: SweepArgs, threads: Option<usize>, deterministic: bool) -> std::result::Result<(), Failure> {
    log(json!({"event": "config", "command": "sweep", "threads": threads, "data": a.data, "ckpt": a.ckpt,
               "strides": a.strides, "split": a.split, "limit": a.limit, "threshold": a.threshold}));
    let (model, _) = load_model(&a.ckpt)?;
    let ds = Dataset::open(&a.data)?;
    let mut plans = prepare_plans(&ds, a.split, model.requires_crops())?;
    if let Some(n) = a.limit {
        plans.truncate(n);
    }
    let items: Vec<SweepItem<'_>> = plans
        .iter()
        .map(|p| SweepItem {
            image: &p.image,
            truth: &p.mask,
            crops: p.crops.as_ref(),
        })
        .collect();
    let base = inference_config(&model, a.strides.first().copied().unwrap_or(30), a.threshold, deterministic);
    let rows = stride_sweep(&items, &model, &a.strides, &base)?;
    if let Some(path) = &a.report {
        let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
        for r in &rows {
            w.serialize(r).map_err(Error::from)?;
        }
        w.flush().map_err(|e| Error::file(path, e))?;
    }
    for r in &rows {
        log(json!({"event": "stride", "row": r}));
    }
    Ok(())
}

fn audit_cmd(a: AuditArgs) -> std::result::Result<(), Failure> {
    let names: Vec<String> = a
        .variants
        .unwrap_or_else(|| AUDIT_VARIANTS.iter().map(|s| s.to_string()).collect());
    log(json!({"event": "config", "command": "audit", "variants": names}));
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    for r in audit_models(&refs)? {
        log(json!({"event": "model", "row": r}));
    }
    Ok(())
}

fn widths_cmd(a: WidthsArgs, threads: Option<usize>) -> std::result::Result<(), Failure> {
    log(json!({"event": "config", "command": "widths", "threads": threads, "data": a.data, "ckpt": a.ckpt,
               "split": a.split, "out": a.out}));
    let (fx, _) = load_featx(&a.ckpt)?;
    let ds = Dataset::open(&a.data)?;
    let h = width_deviation_histogram(&fx, &split_crops(&ds, a.split)?)?;
    h.write_csv(&a.out)?;
    log(json!({"event": "done", "samples": h.samples, "shareWithin1": h.share_within1}));
    Ok(())
}

fn latents_cmd(a: LatentsArgs, threads: Option<usize>) -> std::result::Result<(), Failure> {
    log(json!({"event": "config", "command": "latents", "threads": threads, "data": a.data, "ckpt": a.ckpt,
               "split": a.split, "limit": a.limit, "out": a.out}));
    let (fx, _) = load_featx(&a.ckpt)?;
    let ds = Dataset::open(&a.data)?;
    let mut crops = split_crops(&ds, a.split)?;
    if let Some(n) = a.limit {
        crops.truncate(n);
    }
    let rows = export_latents(&fx, &crops, &a.out)?;
    log(json!({"event": "done", "rows": rows}));
    Ok(())
}

fn serve_cmd(a: ServeArgs, threads: Option<usize>) -> std::result::Result<(), Failure> {
    let models_dir = a
        .models_dir
        .or_else(|| std::env::var_os("FGSS_MODELS_DIR").map(PathBuf::from))
        .ok_or_else(|| Failure::Usage("--models-dir or FGSS_MODELS_DIR is required".into()))?;
    log(json!({"event": "config", "command": "serve", "threads": threads, "port": a.port,
               "modelsDir": models_dir, "workDir": a.work_dir}));
    let config = crate::service::ServiceConfig {
        models_dir,
        work_dir: a.work_dir,
        ..Default::default()
    };
    crate::service::serve_blocking(config, a.port)?;
    Ok(())
}
