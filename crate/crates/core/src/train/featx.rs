use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::{ADAM_PREFIX, FEATX_PREFIX};
use super::{
    CheckpointManifest, ConfigSnapshot, EpochMetrics, LossWeights, Phase, Progress, RunOptions, TrainConfig,
    ARCHIVE_BEST, ARCHIVE_LAST, MANIFEST_FILE,
};
use crate::archive::TensorArchive;
use crate::dataset::{Dataset, Split};
use crate::error::{ensure, Error, Result};
use crate::featx::{width_class, FeatExConfig, FeatureExtractor};
use crate::nn::{Adam, Init, Tensor};
use crate::pipeline::{normalize, select_wall_crops, CropTag};
use crate::raster::Raster;

/// A wall crop taken from a width-normalized floorplan, with its measured
/// wall width as the label.
#[derive(Clone, Debug, PartialEq)]
pub struct CropSample {
    pub floorplan_id: String,
    pub tag: CropTag,
    pub raster: Raster,
    pub width_px: f64,
}

impl CropSample {
    /// Label width in whole pixels.
    pub fn true_width(&self) -> u32 {
        self.width_px.round().max(1.0) as u32
    }
}

/// The five crops of every usable floorplan in `split`, in dataset order.
/// Floorplans without usable walls are skipped.
pub fn crop_dataset(ds: &Dataset, split: Split) -> Result<Vec<CropSample>> {
    let per_plan: Vec<Result<Vec<CropSample>>> = ds
        .indices(split)
        .par_iter()
        .map(|&i| {
            let (image, mask) = ds.load(i)?;
            let id = ds.entry(i)?.id.clone();
            let (img, m, _) = match normalize(&image, &mask) {
                Ok(v) => v,
                Err(Error::UnusableFloorplan(_)) => return Ok(Vec::new()),
                Err(e) => return Err(e),
            };
            let set = select_wall_crops(&img, &m)?;
            Ok(set
                .in_tag_order()
                .into_iter()
                .map(|c| CropSample {
                    floorplan_id: id.clone(),
                    tag: c.tag,
                    raster: c.raster.clone(),
                    width_px: c.width_px,
                })
                .collect())
        })
        .collect();
    let mut out = Vec::new();
    for p in per_plan {
        out.extend(p?);
    }
    Ok(out)
}

/// Eval-mode quality of an extractor on labelled crops.
#[derive(Clone, Debug, PartialEq)]
pub struct CropEvaluation {
    pub recon_mse: f64,
    pub cross_entropy: f64,
    pub width_top1: f64,
    pub width_within1: f64,
    /// Predicted minus true width, per crop.
    pub deviations: Vec<i64>,
}

pub fn evaluate_crops(fx: &FeatureExtractor<f32>, crops: &[CropSample]) -> Result<CropEvaluation> {
    ensure!(!crops.is_empty(), InvalidArgument, "no crops to evaluate");
    let classes = fx.config().width_classes;
    let (mut se, mut ce) = (0.0f64, 0.0f64);
    let mut deviations = Vec::with_capacity(crops.len());
    let (mut top1, mut within1) = (0usize, 0usize);
    let mut pixels = 0usize;
    for chunk in crops.chunks(64) {
        let batch = Tensor::stack(&chunk.iter().map(|c| c.raster.to_tensor::<f32>()).collect::<Vec<_>>());
        let (recon, logits) = fx.evaluate_batch(&batch);
        se += recon
            .data()
            .iter()
            .zip(batch.data())
            .map(|(&r, &x)| ((r - x) as f64).powi(2))
            .sum::<f64>();
        pixels += batch.data().len();
        for (c, l) in chunk.iter().zip(&logits) {
            let k = width_class(c.true_width(), classes);
            let max = l.0.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let lse = max + l.0.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
            ce += lse - l.0[k] as f64;
            top1 += (l.argmax() == k) as usize;
            within1 += (l.argmax().abs_diff(k) <= 1) as usize;
            deviations.push(l.predicted_width() as i64 - c.true_width() as i64);
        }
    }
    let n = crops.len() as f64;
    Ok(CropEvaluation {
        recon_mse: se / pixels as f64,
        cross_entropy: ce / n,
        width_top1: top1 as f64 / n,
        width_within1: within1 as f64 / n,
        deviations,
    })
}

/// Randomness of epoch `epoch`: its own ChaCha stream under the run seed
/// (stream 0 initializes the weights).
pub(crate) fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(epoch as u64 + 1);
    r
}

pub(crate) fn save_state(
    dir: &std::path::Path,
    file: &str,
    fx: &FeatureExtractor<f32>,
    adam: Option<&Adam<f32>>,
) -> Result<()> {
    let mut a = TensorArchive::new();
    a.add_module(FEATX_PREFIX, fx)?;
    if let Some(adam) = adam {
        a.add_adam(ADAM_PREFIX, adam)?;
    }
    a.save(&dir.join(file))
}

/// Trains E2, D2 and the width head on crops of the training split.
pub fn train_feature_extractor(
    ds: &Dataset,
    featx: FeatExConfig,
    config: &TrainConfig,
    opts: &RunOptions<'_>,
    progress: Progress<'_>,
) -> Result<CheckpointManifest> {
    config.validate()?;
    ensure!(config.phase == Phase::Featx, InvalidArgument, "not a featx training config");
    let LossWeights::FeatEx(weights) = config.loss_weights else {
        unreachable!("validated above")
    };
    let train = crop_dataset(ds, Split::Train)?;
    ensure!(!train.is_empty(), InvalidArgument, "the training split yields no wall crops");
    let mut val = crop_dataset(ds, Split::Val)?;
    if val.is_empty() {
        val = train.clone();
    }
    let classes = featx.width_classes;
    let inputs: Vec<Tensor<f32>> = train.iter().map(|c| c.raster.to_tensor()).collect();
    let labels: Vec<usize> = train.iter().map(|c| width_class(c.true_width(), classes)).collect();

    let snapshot = ConfigSnapshot {
        train: config.clone(),
        featx: Some(featx.clone()),
        segmenter: None,
    };
    std::fs::create_dir_all(opts.out_dir).map_err(|e| Error::file(opts.out_dir, e))?;
    let mut adam = Adam::<f32>::default();
    let resuming = opts.resume && opts.out_dir.join(MANIFEST_FILE).is_file();
    let (mut fx, mut manifest) = if resuming {
        let (m, _) = CheckpointManifest::load(opts.out_dir)?;
        ensure!(
            m.config_hash == snapshot.hash(),
            Checkpoint,
            "cannot resume: the run directory was trained with a different configuration"
        );
        let state = TensorArchive::load(&opts.out_dir.join(&m.state_archive))?;
        let mut fx = FeatureExtractor::new(featx, &mut Init::Meta)?;
        state.load_module(FEATX_PREFIX, &mut fx)?;
        state.load_adam(ADAM_PREFIX, &mut adam, m.optimizer_steps)?;
        (fx, m)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let fx = FeatureExtractor::new(featx, &mut Init::Random(&mut rng))?;
        (fx, CheckpointManifest::new(snapshot, ds.manifest_hash.clone())?)
    };

    let mut best = manifest
        .best_epoch
        .and_then(|e| manifest.metric_history.get(e))
        .and_then(|m| m.val_loss)
        .unwrap_or(f64::INFINITY);
    let end = opts
        .max_new_epochs
        .map_or(config.epochs, |k| (manifest.epoch + k).min(config.epochs));
    for epoch in manifest.epoch..end {
        let lr = config.lr_at(epoch);
        let mut rng = epoch_rng(config.seed, epoch);
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let x = Tensor::stack(&batch.iter().map(|&i| inputs[i].clone()).collect::<Vec<_>>());
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let step = fx.accumulate_gradients(&x, &y, weights, &mut rng)?;
            ensure!(step.loss.is_finite(), InvalidArgument, "training diverged at epoch {epoch}");
            adam.step(&mut fx, lr);
            loss_sum += step.loss * batch.len() as f64;
        }
        let ev = evaluate_crops(&fx, &val)?;
        let val_loss = weights.w1 * ev.recon_mse + weights.w2 * ev.cross_entropy;
        let row = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / inputs.len() as f64,
            val_loss: Some(val_loss),
            recon_mse: Some(ev.recon_mse),
            width_top1: Some(ev.width_top1),
            width_within1: Some(ev.width_within1),
            val_iou: None,
        };
        if val_loss < best {
            best = val_loss;
            manifest.best_epoch = Some(epoch);
            save_state(opts.out_dir, ARCHIVE_BEST, &fx, None)?;
        }
        save_state(opts.out_dir, ARCHIVE_LAST, &fx, Some(&adam))?;
        manifest.metric_history.push(row.clone());
        manifest.epoch = epoch + 1;
        manifest.optimizer_steps = adam.step;
        manifest.write(opts.out_dir)?;
        progress(&row);
        if config.early_stop.reached(&row) {
            break;
        }
    }
    Ok(manifest)
}
