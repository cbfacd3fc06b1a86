//! Two-phase training (feature extractor first, then the segmenter with the
//! extractor frozen), metric logging and checkpoints.
//!
//! A run directory holds:
//!
//! ```text
//! manifest.json   CheckpointManifest
//! best.fgss       weights of the best epoch so far
//! last.fgss       weights and optimizer moments of the latest epoch (resume)
//! metrics.csv     epoch, lr, trainLoss, valMetric
//! ```

mod checkpoint;
mod featx;
mod segmenter;

pub use checkpoint::{
    load_featx, load_model, CheckpointManifest, ConfigSnapshot, ARCHIVE_BEST, ARCHIVE_LAST, MANIFEST_FILE,
    METRICS_FILE,
};
pub use featx::{crop_dataset, evaluate_crops, train_feature_extractor, CropEvaluation, CropSample};
pub use segmenter::{prepare_plans, train_segmenter, PreparedPlan};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::featx::FeatExLossWeights;
use crate::segmenter::SegLossWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Featx,
    Segmenter,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LossWeights {
    FeatEx(FeatExLossWeights),
    Seg(SegLossWeights),
}

/// Optional targets that end a run early once every given one is met on
/// the validation split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EarlyStop {
    pub max_recon_mse: Option<f64>,
    pub min_width_within1: Option<f64>,
    pub min_val_iou: Option<f64>,
}

impl EarlyStop {
    fn is_set(&self) -> bool {
        self.max_recon_mse.is_some() || self.min_width_within1.is_some() || self.min_val_iou.is_some()
    }

    fn reached(&self, m: &EpochMetrics) -> bool {
        let le = |limit: Option<f64>, v: Option<f64>| limit.is_none_or(|l| v.is_some_and(|v| v < l));
        let ge = |limit: Option<f64>, v: Option<f64>| limit.is_none_or(|l| v.is_some_and(|v| v >= l));
        self.is_set()
            && le(self.max_recon_mse, m.recon_mse)
            && ge(self.min_width_within1, m.width_within1)
            && ge(self.min_val_iou, m.val_iou)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Stepped decay: the rate is multiplied by this every `decay_every`
    /// epochs. 1.0 disables it.
    pub decay_factor: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub loss_weights: LossWeights,
    pub augment_prob: f64,
    pub seed: u64,
    /// Segmenter only: random tiles drawn per floorplan per epoch.
    pub tiles_per_plan: usize,
    /// Segmenter only: validation IoU every this many epochs.
    pub val_every: usize,
    /// Segmenter only: stride of the tiled validation inference.
    pub val_stride: usize,
    /// Segmenter only: keep the feature extractor fixed.
    pub freeze_featx: bool,
    #[serde(default)]
    pub early_stop: EarlyStop,
}

impl TrainConfig {
    pub fn featx() -> Self {
        Self {
            phase: Phase::Featx,
            epochs: 60,
            learning_rate: 0.001,
            decay_factor: 0.9,
            decay_every: 10,
            batch_size: 256,
            loss_weights: LossWeights::FeatEx(FeatExLossWeights::default()),
            augment_prob: crate::pipeline::ROTATE_PROB,
            seed: 0,
            tiles_per_plan: 4,
            val_every: 1,
            val_stride: crate::infer::DEFAULT_STRIDE,
            freeze_featx: true,
            early_stop: EarlyStop::default(),
        }
    }

    pub fn segmenter() -> Self {
        Self {
            phase: Phase::Segmenter,
            epochs: 120,
            learning_rate: 0.0001,
            batch_size: 12,
            loss_weights: LossWeights::Seg(SegLossWeights::default()),
            ..Self::featx()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size > 0, InvalidArgument, "batch size must be positive");
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            InvalidArgument,
            "learning rate must be positive"
        );
        ensure!(
            self.decay_factor > 0.0 && self.decay_factor <= 1.0,
            InvalidArgument,
            "decay factor {} outside (0, 1]",
            self.decay_factor
        );
        ensure!(self.decay_every > 0, InvalidArgument, "decay interval must be positive");
        ensure!(
            (0.0..=1.0).contains(&self.augment_prob),
            InvalidArgument,
            "augmentation probability outside [0, 1]"
        );
        match (self.phase, self.loss_weights) {
            (Phase::Featx, LossWeights::FeatEx(_)) => {}
            (Phase::Segmenter, LossWeights::Seg(_)) => {
                ensure!(self.tiles_per_plan > 0, InvalidArgument, "tiles per plan must be positive");
                ensure!(self.val_every > 0, InvalidArgument, "validation interval must be positive");
            }
            _ => ensure!(false, InvalidArgument, "loss weights do not belong to the {:?} phase", self.phase),
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        apply_decay(self.learning_rate, epoch, self.decay_factor, self.decay_every)
    }
}

/// `lr * factor^floor(epoch / every)`.
pub fn apply_decay(learning_rate: f64, epoch: usize, factor: f64, every: usize) -> f64 {
    learning_rate * factor.powi((epoch / every.max(1)) as i32)
}

/// One row of the metric history. Fields that do not apply to the phase,
/// or to an epoch without validation, are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub recon_mse: Option<f64>,
    pub width_top1: Option<f64>,
    pub width_within1: Option<f64>,
    pub val_iou: Option<f64>,
}

impl EpochMetrics {
    /// Model-selection metric: validation loss (featx) or IoU (segmenter).
    pub fn val_metric(&self, phase: Phase) -> Option<f64> {
        match phase {
            Phase::Featx => self.val_loss,
            Phase::Segmenter => self.val_iou,
        }
    }
}

/// Where a run writes and whether it picks up an existing one.
#[derive(Clone, Debug)]
pub struct RunOptions<'a> {
    pub out_dir: &'a std::path::Path,
    /// Continue from `last.fgss` if the directory already holds a run with
    /// the same configuration.
    pub resume: bool,
    /// Stop after this many epochs in this invocation (for tests and
    /// interrupted runs); the manifest still targets `config.epochs`.
    pub max_new_epochs: Option<usize>,
}

impl<'a> RunOptions<'a> {
    pub fn new(out_dir: &'a std::path::Path) -> Self {
        Self {
            out_dir,
            resume: false,
            max_new_epochs: None,
        }
    }
}

/// Receives every finished epoch; the CLI turns these into log lines.
pub type Progress<'a> = &'a mut dyn FnMut(&EpochMetrics);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_examples() {
        assert_eq!(apply_decay(0.001, 0, 0.9, 10), 0.001);
        assert!((apply_decay(0.001, 10, 0.9, 10) - 0.0009).abs() < 1e-15);
        assert_eq!(apply_decay(0.5, 59, 0.9, 10), 0.5 * 0.9f64.powi(5));
        assert_eq!(apply_decay(0.5, 59, 1.0, 10), 0.5);
    }

    #[test]
    fn defaults() {
        let f = TrainConfig::featx();
        assert_eq!((f.epochs, f.learning_rate, f.batch_size), (60, 0.001, 256));
        let s = TrainConfig::segmenter();
        assert_eq!((s.epochs, s.learning_rate, s.batch_size), (120, 0.0001, 12));
        assert_eq!(s.loss_weights, LossWeights::Seg(SegLossWeights { w3: 1.0, w4: 0.3 }));
        assert_eq!(f.augment_prob, 0.2);
        f.validate().unwrap();
        s.validate().unwrap();
        let mut bad = s.clone();
        bad.loss_weights = f.loss_weights;
        assert!(bad.validate().is_err());
        bad = s;
        bad.decay_factor = 1.5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn early_stop_needs_every_target() {
        let m = EpochMetrics {
            epoch: 0,
            lr: 1.0,
            train_loss: 1.0,
            val_loss: None,
            recon_mse: Some(0.01),
            width_top1: None,
            width_within1: Some(0.7),
            val_iou: None,
        };
        assert!(!EarlyStop::default().reached(&m));
        let mut e = EarlyStop {
            max_recon_mse: Some(0.05),
            ..Default::default()
        };
        assert!(e.reached(&m));
        e.min_width_within1 = Some(0.8);
        assert!(!e.reached(&m));
    }
}
