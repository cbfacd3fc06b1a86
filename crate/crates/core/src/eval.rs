//! Dataset-level IoU with the grey-crop ablation, width-deviation
//! histograms, latent export and analytic model audits.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::error::{ensure, Error, Result};
use crate::featx::FeatureExtractor;
use crate::infer::{segment_floorplan, InferenceConfig};
use crate::model::TileModel;
use crate::pipeline::{CropTag, WallCropSet, CROP_SIDE};
use crate::raster::{iou, Raster};
use crate::segmenter::{count_parameters, SegmenterConfig};
use crate::train::{crop_dataset, prepare_plans, CropSample, PreparedPlan};

/// Grey levels of ablation crops are drawn from this band.
pub const GREY_RANGE: (f32, f32) = (0.2, 0.8);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    #[default]
    None,
    /// Every injected crop is replaced by a constant grey raster.
    Grey,
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "grey" | "gray" => Ok(Ablation::Grey),
            other => Err(Error::InvalidArgument(format!("unknown ablation {other:?}"))),
        }
    }
}

/// Crop set with each crop replaced by a constant raster whose level is
/// drawn from [`GREY_RANGE`]. `stream` selects an independent draw under
/// `seed` (one per floorplan).
pub fn grey_crop_set(set: &WallCropSet, seed: u64, stream: u64) -> Result<WallCropSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut levels = [0.0f32; 5];
    for l in levels.iter_mut() {
        *l = rng.random_range(GREY_RANGE.0..GREY_RANGE.1);
    }
    set.with_rasters(|tag: CropTag| Raster::filled(CROP_SIDE, CROP_SIDE, 1, levels[tag.index()]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FloorplanIou {
    pub floorplan_id: String,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalReport {
    pub model: String,
    pub split: Option<Split>,
    pub ablation: Ablation,
    pub seed: u64,
    pub inference: InferenceConfig,
    pub per_floorplan: Vec<FloorplanIou>,
    pub mean_iou: f64,
    pub total_ms: f64,
    pub mean_ms_per_floorplan: f64,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::file(path, e))
    }

    /// One row per floorplan plus a final `mean` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["floorplanId", "iou"])?;
        for f in &self.per_floorplan {
            w.write_record([f.floorplan_id.clone(), f.iou.to_string()])?;
        }
        w.write_record(["mean".to_string(), self.mean_iou.to_string()])?;
        w.flush().map_err(|e| Error::file(path, e))
    }
}

/// Segments every plan and scores it against its mask. With
/// [`Ablation::Grey`] only the crops handed to the model change.
pub fn evaluate_plans<M: TileModel + ?Sized>(
    plans: &[PreparedPlan],
    model: &M,
    model_name: &str,
    config: &InferenceConfig,
    ablation: Ablation,
    seed: u64,
) -> Result<EvalReport> {
    ensure!(!plans.is_empty(), InvalidArgument, "nothing to evaluate");
    let start = Instant::now();
    let mut per_floorplan = Vec::with_capacity(plans.len());
    for (i, p) in plans.iter().enumerate() {
        let crops = match (&p.crops, ablation) {
            (Some(c), Ablation::Grey) => Some(grey_crop_set(c, seed, i as u64)?),
            (c, _) => c.clone(),
        };
        let crops = if model.requires_crops() { crops } else { None };
        let s = segment_floorplan(&p.image, crops.as_ref(), model, config)?;
        per_floorplan.push(FloorplanIou {
            floorplan_id: p.id.clone(),
            iou: iou(&s.mask, &p.mask)?,
        });
    }
    let total_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(EvalReport {
        model: model_name.to_string(),
        split: None,
        ablation,
        seed,
        inference: *config,
        mean_iou: per_floorplan.iter().map(|f| f.iou).sum::<f64>() / per_floorplan.len() as f64,
        per_floorplan,
        total_ms,
        mean_ms_per_floorplan: total_ms / plans.len() as f64,
    })
}

/// Loads, width-normalizes and evaluates a dataset split.
pub fn evaluate_dataset<M: TileModel + ?Sized>(
    ds: &Dataset,
    split: Split,
    model: &M,
    model_name: &str,
    config: &InferenceConfig,
    ablation: Ablation,
    seed: u64,
) -> Result<EvalReport> {
    let plans = prepare_plans(ds, split, model.requires_crops())?;
    let mut r = evaluate_plans(&plans, model, model_name, config, ablation, seed)?;
    r.split = Some(split);
    Ok(r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WidthDeviationHistogram {
    /// Predicted minus true width (pixels) to count.
    pub bins: BTreeMap<i64, usize>,
    pub samples: usize,
    pub share_within1: f64,
}

impl WidthDeviationHistogram {
    pub fn from_deviations(deviations: &[i64]) -> Self {
        let mut bins = BTreeMap::new();
        for &d in deviations {
            *bins.entry(d).or_insert(0) += 1;
        }
        let within = deviations.iter().filter(|d| d.abs() <= 1).count();
        Self {
            bins,
            samples: deviations.len(),
            share_within1: if deviations.is_empty() {
                0.0
            } else {
                within as f64 / deviations.len() as f64
            },
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["deviationPx", "count"])?;
        for (d, c) in &self.bins {
            w.write_record([d.to_string(), c.to_string()])?;
        }
        w.flush().map_err(|e| Error::file(path, e))
    }
}

pub fn width_deviation_histogram(fx: &FeatureExtractor<f32>, crops: &[CropSample]) -> Result<WidthDeviationHistogram> {
    let ev = crate::train::evaluate_crops(fx, crops)?;
    Ok(WidthDeviationHistogram::from_deviations(&ev.deviations))
}

/// Writes one CSV row per crop: floorplan id, tag, true width and the
/// flattened E2 latent. Returns the number of rows.
pub fn export_latents(fx: &FeatureExtractor<f32>, crops: &[CropSample], out: &Path) -> Result<usize> {
    let n = fx.config().latent_channels() * fx.config().latent_side().pow(2);
    let mut w = csv::Writer::from_path(out)?;
    let mut header = vec!["floorplanId".to_string(), "tag".to_string(), "trueWidth".to_string()];
    header.extend((0..n).map(|i| format!("z{i}")));
    w.write_record(&header)?;
    for c in crops {
        let z = fx.encode(&c.raster)?;
        let mut row = vec![c.floorplan_id.clone(), c.tag.to_string(), c.true_width().to_string()];
        row.extend(z.values.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::file(out, e))?;
    Ok(crops.len())
}

/// Crops of a split for latent export and histograms.
pub fn split_crops(ds: &Dataset, split: Split) -> Result<Vec<CropSample>> {
    crop_dataset(ds, split)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AuditRow {
    pub name: String,
    /// Multiply-accumulates of one forward pass over a tile.
    pub flops: u64,
    pub mib: f64,
    pub params: usize,
}

pub const AUDIT_VARIANTS: [&str; 5] = ["fgss16", "fgss16-norec", "fgss32", "fgss32-norec", "unet32"];

/// Analytic size and cost of the named variants.
pub fn audit_models(names: &[&str]) -> Result<Vec<AuditRow>> {
    names
        .iter()
        .map(|n| {
            let r = count_parameters(&SegmenterConfig::named(n)?)?;
            Ok(AuditRow {
                name: r.name,
                flops: r.macs,
                mib: r.mib,
                params: r.total,
            })
        })
        .collect()
}
