use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::{ADAM_FEATX_PREFIX, ADAM_PREFIX, FEATX_PREFIX, SEG_PREFIX};
use super::featx::epoch_rng;
use super::{
    CheckpointManifest, ConfigSnapshot, EpochMetrics, LossWeights, Phase, Progress, RunOptions, TrainConfig,
    ARCHIVE_BEST, ARCHIVE_LAST, MANIFEST_FILE,
};
use crate::archive::TensorArchive;
use crate::dataset::{Dataset, Split};
use crate::error::{ensure, Error, Result};
use crate::featx::{FeatureExtractor, LatentBlock};
use crate::infer::{segment_with_latent, InferenceConfig};
use crate::nn::{Adam, Init, Tensor};
use crate::pipeline::{augment_rotate, make_train_tiles, normalize, select_wall_crops, NormalizationResult, WallCropSet};
use crate::raster::{iou, BitMask, Raster};
use crate::segmenter::{seg_loss, SegLossWeights, Segmenter, SegmenterConfig, Variant};

/// A width-normalized floorplan with its ground truth and (for fgss
/// training) its automatically selected crop set.
#[derive(Clone, Debug)]
pub struct PreparedPlan {
    pub id: String,
    pub image: Raster,
    pub mask: BitMask,
    pub crops: Option<WallCropSet>,
    pub normalization: NormalizationResult,
}

/// Loads and normalizes every usable floorplan of `split`, in dataset order.
pub fn prepare_plans(ds: &Dataset, split: Split, with_crops: bool) -> Result<Vec<PreparedPlan>> {
    let plans: Vec<Result<Option<PreparedPlan>>> = ds
        .indices(split)
        .par_iter()
        .map(|&i| {
            let (image, mask) = ds.load(i)?;
            let (image, mask, normalization) = match normalize(&image, &mask) {
                Ok(v) => v,
                Err(Error::UnusableFloorplan(_)) => return Ok(None),
                Err(e) => return Err(e),
            };
            let crops = if with_crops { Some(select_wall_crops(&image, &mask)?) } else { None };
            Ok(Some(PreparedPlan {
                id: ds.entry(i)?.id.clone(),
                image,
                mask,
                crops,
                normalization,
            }))
        })
        .collect();
    plans.into_iter().filter_map(Result::transpose).collect()
}

fn crop_batch(set: &WallCropSet) -> Result<Tensor<f32>> {
    let rasters = set.rasters_in_tag_order()?;
    Ok(Tensor::stack(&rasters.iter().map(|r| r.to_tensor()).collect::<Vec<_>>()))
}

/// Mean IoU of tiled inference over `plans`.
fn validate(
    seg: &Segmenter<f32>,
    fx: Option<&FeatureExtractor<f32>>,
    plans: &[PreparedPlan],
    stride: usize,
) -> Result<f64> {
    let cfg = InferenceConfig {
        stride,
        tile_side: seg.config().tile_side,
        ..Default::default()
    };
    let mut total = 0.0;
    for p in plans {
        let latent = match (fx, &p.crops) {
            (Some(fx), Some(c)) => Some(fx.encode_crop_set(c)?),
            _ => None,
        };
        let s = segment_with_latent(&p.image, latent.as_ref(), seg, &cfg)?;
        total += iou(&s.mask, &p.mask)?;
    }
    Ok(total / plans.len() as f64)
}

fn save_state(
    dir: &std::path::Path,
    file: &str,
    seg: &Segmenter<f32>,
    fx: Option<&FeatureExtractor<f32>>,
    adams: Option<(&Adam<f32>, Option<&Adam<f32>>)>,
) -> Result<()> {
    let mut a = TensorArchive::new();
    a.add_module(SEG_PREFIX, seg)?;
    if let Some(fx) = fx {
        a.add_module(FEATX_PREFIX, fx)?;
    }
    if let Some((adam, adam_fx)) = adams {
        a.add_adam(ADAM_PREFIX, adam)?;
        if let Some(af) = adam_fx {
            a.add_adam(ADAM_FEATX_PREFIX, af)?;
        }
    }
    a.save(&dir.join(file))
}

/// Trains E1, D1 (and E3) on random tiles of the training split. `featx`
/// must be given for fgss variants and is ignored for the plain U-Net.
pub fn train_segmenter(
    ds: &Dataset,
    seg_config: SegmenterConfig,
    featx: Option<FeatureExtractor<f32>>,
    config: &TrainConfig,
    opts: &RunOptions<'_>,
    progress: Progress<'_>,
) -> Result<CheckpointManifest> {
    config.validate()?;
    seg_config.validate()?;
    ensure!(config.phase == Phase::Segmenter, InvalidArgument, "not a segmenter training config");
    let LossWeights::Seg(weights) = config.loss_weights else {
        unreachable!("validated above")
    };
    let fgss = seg_config.variant == Variant::Fgss;
    let mut fx = match (fgss, featx) {
        (true, None) => {
            return Err(Error::InvalidArgument(
                "fgss variants need a trained feature extractor checkpoint".into(),
            ))
        }
        (true, Some(f)) => {
            ensure!(
                Some(f.config()) == seg_config.featx.as_ref(),
                InvalidArgument,
                "feature extractor checkpoint does not match the variant's extractor config"
            );
            Some(f)
        }
        (false, _) => None,
    };
    let frozen = config.freeze_featx;

    let train = prepare_plans(ds, Split::Train, fgss)?;
    ensure!(!train.is_empty(), InvalidArgument, "the training split has no usable floorplans");
    let mut val = prepare_plans(ds, Split::Val, fgss)?;
    if val.is_empty() {
        val = train.clone();
    }

    let snapshot = ConfigSnapshot {
        train: config.clone(),
        featx: if fgss { seg_config.featx.clone() } else { None },
        segmenter: Some(seg_config.clone()),
    };
    std::fs::create_dir_all(opts.out_dir).map_err(|e| Error::file(opts.out_dir, e))?;
    let mut adam = Adam::<f32>::default();
    let mut adam_fx = Adam::<f32>::default();
    let resuming = opts.resume && opts.out_dir.join(MANIFEST_FILE).is_file();
    let (mut seg, mut manifest) = if resuming {
        let (m, _) = CheckpointManifest::load(opts.out_dir)?;
        ensure!(
            m.config_hash == snapshot.hash(),
            Checkpoint,
            "cannot resume: the run directory was trained with a different configuration"
        );
        let state = TensorArchive::load(&opts.out_dir.join(&m.state_archive))?;
        let mut seg = Segmenter::new(seg_config, &mut Init::Meta)?;
        state.load_module(SEG_PREFIX, &mut seg)?;
        state.load_adam(ADAM_PREFIX, &mut adam, m.optimizer_steps)?;
        if let Some(fx) = fx.as_mut() {
            state.load_module(FEATX_PREFIX, fx)?;
            if !frozen {
                state.load_adam(ADAM_FEATX_PREFIX, &mut adam_fx, m.featx_optimizer_steps)?;
            }
        }
        (seg, m)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let seg = Segmenter::new(seg_config, &mut Init::Random(&mut rng))?;
        (seg, CheckpointManifest::new(snapshot, ds.manifest_hash.clone())?)
    };
    let tile = seg.config().tile_side;

    // With a frozen extractor the injected latents never change.
    let fixed_latents: Option<Vec<LatentBlock>> = match (&fx, frozen) {
        (Some(f), true) => Some(
            train
                .iter()
                .map(|p| f.encode_crop_set(p.crops.as_ref().expect("prepared with crops")))
                .collect::<Result<_>>()?,
        ),
        _ => None,
    };

    let mut best = manifest
        .best_epoch
        .and_then(|e| manifest.metric_history.get(e))
        .and_then(|m| m.val_iou)
        .unwrap_or(f64::NEG_INFINITY);
    let end = opts
        .max_new_epochs
        .map_or(config.epochs, |k| (manifest.epoch + k).min(config.epochs));
    for epoch in manifest.epoch..end {
        let lr = config.lr_at(epoch);
        let mut rng = epoch_rng(config.seed, epoch);
        let mut tiles = Vec::new();
        for (pi, p) in train.iter().enumerate() {
            let (img, mask) = augment_rotate(&p.image, &p.mask, config.augment_prob, &mut rng);
            for t in make_train_tiles(&p.id, &img, &mask, &mut rng, config.tiles_per_plan, tile) {
                tiles.push((pi, t));
            }
        }
        tiles.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in tiles.chunks(config.batch_size) {
            let x = Tensor::stack(&batch.iter().map(|(_, t)| t.image.to_tensor()).collect::<Vec<_>>());
            let m = Tensor::stack(&batch.iter().map(|(_, t)| t.mask.to_raster().to_tensor()).collect::<Vec<_>>());
            let value = match (fx.as_mut(), &fixed_latents) {
                (None, _) => seg.accumulate_gradients(&x, &m, None, weights)?,
                (Some(_), Some(lat)) => {
                    let z = Tensor::stack(&batch.iter().map(|(pi, _)| lat[*pi].to_tensor()).collect::<Vec<_>>());
                    seg.accumulate_gradients(&x, &m, Some(&z), weights)?
                }
                (Some(f), None) => {
                    let v = joint_step(&mut seg, f, &train, batch, &x, &m, weights)?;
                    adam_fx.step(f, lr);
                    v
                }
            };
            ensure!(value.loss.is_finite(), InvalidArgument, "training diverged at epoch {epoch}");
            adam.step(&mut seg, lr);
            loss_sum += value.loss * batch.len() as f64;
        }
        let validate_now = (epoch + 1) % config.val_every == 0 || epoch + 1 == config.epochs;
        let val_iou = if validate_now {
            Some(validate(&seg, fx.as_ref(), &val, config.val_stride)?)
        } else {
            None
        };
        let row = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / tiles.len() as f64,
            val_loss: None,
            recon_mse: None,
            width_top1: None,
            width_within1: None,
            val_iou,
        };
        let improved = val_iou.is_some_and(|v| v > best);
        if improved {
            best = val_iou.unwrap_or(best);
            manifest.best_epoch = Some(epoch);
        }
        if improved || manifest.best_epoch.is_none() {
            save_state(opts.out_dir, ARCHIVE_BEST, &seg, fx.as_ref(), None)?;
        }
        let adam_fx_state = (!frozen && fx.is_some()).then_some(&adam_fx);
        save_state(opts.out_dir, ARCHIVE_LAST, &seg, fx.as_ref(), Some((&adam, adam_fx_state)))?;
        manifest.metric_history.push(row.clone());
        manifest.epoch = epoch + 1;
        manifest.optimizer_steps = adam.step;
        manifest.featx_optimizer_steps = adam_fx.step;
        manifest.write(opts.out_dir)?;
        progress(&row);
        if config.early_stop.reached(&row) {
            break;
        }
    }
    Ok(manifest)
}

/// One batch with the extractor trainable: the crop sets of every tile go
/// through E2 in training mode and the injected-latent gradient flows back
/// into it. The E3 target is treated as a constant.
fn joint_step(
    seg: &mut Segmenter<f32>,
    fx: &mut FeatureExtractor<f32>,
    plans: &[PreparedPlan],
    batch: &[(usize, crate::pipeline::TrainTile)],
    x: &Tensor<f32>,
    m: &Tensor<f32>,
    weights: SegLossWeights,
) -> Result<crate::segmenter::SegLossValue> {
    let crops = batch
        .iter()
        .map(|(pi, _)| crop_batch(plans[*pi].crops.as_ref().expect("prepared with crops")))
        .collect::<Result<Vec<_>>>()?;
    let zc = fx.encoder.forward(&Tensor::stack(&crops));
    let [nc, c, h, w] = zc.shape();
    let per = nc / batch.len();
    let z = zc.reshape([batch.len(), per * c, h, w]);
    let out = seg.forward(x, Some(&z))?;
    let l = seg_loss(&out.logits, m, out.e3.as_ref(), out.e3.as_ref().map(|_| &z), weights)?;
    let dz = seg.backward(&l.dlogits, l.de3.as_ref()).expect("fgss backward yields a latent gradient");
    fx.encoder.backward(&dz.reshape([nc, c, h, w]));
    Ok(l.value)
}
