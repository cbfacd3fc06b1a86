use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EpochMetrics, Phase, TrainConfig};
use crate::archive::TensorArchive;
use crate::error::{ensure, Error, Result};
use crate::featx::{FeatExConfig, FeatureExtractor};
use crate::model::FgssModel;
use crate::nn::{Init, Parameters};
use crate::segmenter::{count_parameters, Segmenter, SegmenterConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ARCHIVE_BEST: &str = "best.fgss";
pub const ARCHIVE_LAST: &str = "last.fgss";
pub const METRICS_FILE: &str = "metrics.csv";

pub(crate) const FEATX_PREFIX: &str = "featx";
pub(crate) const SEG_PREFIX: &str = "seg";
pub(crate) const ADAM_PREFIX: &str = "adam";
pub(crate) const ADAM_FEATX_PREFIX: &str = "adam_featx";

const LR_SCHEDULE_NOTE: &str =
    "stepped decay lr * decayFactor^floor(epoch / decayEvery); no L2 penalty on the weights";

/// Everything needed to rebuild the run's networks and optimizer schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ConfigSnapshot {
    pub train: TrainConfig,
    pub featx: Option<FeatExConfig>,
    pub segmenter: Option<SegmenterConfig>,
}

impl ConfigSnapshot {
    /// Hex SHA-256 of the snapshot's JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config snapshot serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CheckpointManifest {
    pub phase: Phase,
    pub config_snapshot: ConfigSnapshot,
    pub config_hash: String,
    /// Completed epochs.
    pub epoch: usize,
    pub best_epoch: Option<usize>,
    pub metric_history: Vec<EpochMetrics>,
    /// Best weights, relative to the manifest.
    pub weight_archive: String,
    /// Latest weights plus optimizer moments, relative to the manifest.
    pub state_archive: String,
    pub optimizer_steps: u64,
    pub featx_optimizer_steps: u64,
    pub created_unix: u64,
    pub dataset_hash: String,
    pub parameter_count: usize,
    pub lr_schedule: String,
}

impl CheckpointManifest {
    pub(crate) fn new(snapshot: ConfigSnapshot, dataset_hash: String) -> Result<Self> {
        let parameter_count = match (&snapshot.segmenter, &snapshot.featx) {
            (Some(s), _) => count_parameters(s)?.total,
            (None, Some(f)) => FeatureExtractor::<f32>::new(f.clone(), &mut Init::Meta)?.parameter_count(),
            (None, None) => return Err(Error::Checkpoint("config snapshot names no network".into())),
        };
        Ok(Self {
            phase: snapshot.train.phase,
            config_hash: snapshot.hash(),
            config_snapshot: snapshot,
            epoch: 0,
            best_epoch: None,
            metric_history: Vec::new(),
            weight_archive: ARCHIVE_BEST.into(),
            state_archive: ARCHIVE_LAST.into(),
            optimizer_steps: 0,
            featx_optimizer_steps: 0,
            created_unix: now_unix(),
            dataset_hash,
            parameter_count,
            lr_schedule: LR_SCHEDULE_NOTE.into(),
        })
    }

    /// Reads `path`, or `path/manifest.json` when `path` is a directory, and
    /// checks it against its archives. Returns the manifest and its directory.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let bytes = std::fs::read(&file).map_err(|e| Error::file(&file, e))?;
        let m: Self = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", file.display())))?;
        let dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate(&dir)?;
        Ok((m, dir))
    }

    /// Config hash, metric history length and archive shapes.
    pub fn validate(&self, dir: &Path) -> Result<()> {
        ensure!(
            self.config_hash == self.config_snapshot.hash(),
            Checkpoint,
            "config hash does not match the config snapshot"
        );
        ensure!(
            self.metric_history.len() == self.epoch,
            Checkpoint,
            "{} metric rows for {} completed epochs",
            self.metric_history.len(),
            self.epoch
        );
        ensure!(self.phase == self.config_snapshot.train.phase, Checkpoint, "phase disagrees with the config");
        let path = dir.join(&self.weight_archive);
        ensure!(path.is_file(), Checkpoint, "weight archive {} is missing", path.display());
        let archive = TensorArchive::load(&path)?;
        self.check_archive(&archive)
    }

    fn check_archive(&self, archive: &TensorArchive) -> Result<()> {
        let snap = &self.config_snapshot;
        if let Some(f) = &snap.featx {
            let fx = FeatureExtractor::<f32>::new(f.clone(), &mut Init::Meta)?;
            archive.check_module(FEATX_PREFIX, &fx)?;
        }
        if let Some(s) = &snap.segmenter {
            let seg = Segmenter::<f32>::new(s.clone(), &mut Init::Meta)?;
            archive.check_module(SEG_PREFIX, &seg)?;
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        std::fs::write(&tmp, serde_json::to_vec_pretty(self)?).map_err(|e| Error::file(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::file(&path, e))?;
        self.write_metrics_csv(&dir.join(METRICS_FILE))
    }

    pub fn write_metrics_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "lr", "trainLoss", "valMetric"])?;
        for m in &self.metric_history {
            let val = m.val_metric(self.phase).map(|v| v.to_string()).unwrap_or_default();
            w.write_record([m.epoch.to_string(), m.lr.to_string(), m.train_loss.to_string(), val])?;
        }
        w.flush().map_err(|e| Error::file(path, e))
    }

    /// Short name for listings: the segmenter's display name or "featx".
    pub fn model_name(&self) -> String {
        match &self.config_snapshot.segmenter {
            Some(s) => s.display_name(),
            None => "featx".into(),
        }
    }
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Best feature-extractor weights from a featx or segmenter checkpoint.
pub fn load_featx(path: &Path) -> Result<(FeatureExtractor<f32>, CheckpointManifest)> {
    let (m, dir) = CheckpointManifest::load(path)?;
    let cfg = m
        .config_snapshot
        .featx
        .clone()
        .ok_or_else(|| Error::Checkpoint("checkpoint holds no feature extractor".into()))?;
    let archive = TensorArchive::load(&dir.join(&m.weight_archive))?;
    let mut fx = FeatureExtractor::new(cfg, &mut Init::Meta)?;
    archive.load_module(FEATX_PREFIX, &mut fx)?;
    Ok((fx, m))
}

/// Best segmenter weights (with the extractor for fgss variants).
pub fn load_model(path: &Path) -> Result<(FgssModel, CheckpointManifest)> {
    let (m, dir) = CheckpointManifest::load(path)?;
    let cfg = m
        .config_snapshot
        .segmenter
        .clone()
        .ok_or_else(|| Error::Checkpoint("checkpoint holds no segmenter (is it a featx run?)".into()))?;
    let archive = TensorArchive::load(&dir.join(&m.weight_archive))?;
    let mut seg = Segmenter::new(cfg.clone(), &mut Init::Meta)?;
    archive.load_module(SEG_PREFIX, &mut seg)?;
    let featx = match (&cfg.featx, cfg.variant) {
        (Some(f), crate::segmenter::Variant::Fgss) => {
            let mut fx = FeatureExtractor::new(f.clone(), &mut Init::Meta)?;
            archive.load_module(FEATX_PREFIX, &mut fx)?;
            Some(fx)
        }
        _ => None,
    };
    Ok((FgssModel::new(seg, featx)?, m))
}
