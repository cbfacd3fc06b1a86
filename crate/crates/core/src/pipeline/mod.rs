//! Floorplan preprocessing: width normalization, wall-crop selection,
//! rotation augmentation and training-tile sampling.

mod augment;
mod crops;

pub use augment::{augment_rotate, make_train_tiles, rotate_pair, TrainTile, ROTATE_PROB, TILE_SIDE};
pub use crops::{
    crop_center, rank_component, select_wall_crops, CropSidecar, CropTag, SidecarCrop, WallCrop, WallCropSet,
    CROP_SIDE,
};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::raster::{connected_components, rescale, rescale_mask, BitMask, Raster, Resample, WallComponent};

/// Corpus-wide mean wall width every floorplan is rescaled to.
pub const TARGET_WIDTH: f64 = 24.18;

/// Components whose length is below this multiple of their width are treated
/// as blobs and left out of the width average.
pub const BLOB_RATIO: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NormalizationResult {
    pub scale_factor: f64,
    pub measured_mean_width: f64,
    pub target_width: f64,
}

impl NormalizationResult {
    pub fn from_mean_width(mean: f64) -> Result<Self> {
        ensure!(
            mean.is_finite() && mean > 0.0,
            InvalidArgument,
            "mean wall width must be positive, got {mean}"
        );
        Ok(Self {
            scale_factor: TARGET_WIDTH / mean,
            measured_mean_width: mean,
            target_width: TARGET_WIDTH,
        })
    }
}

/// Mean width over wall-like components (length at least [`BLOB_RATIO`] times width).
pub fn mean_wall_width(components: &[WallComponent]) -> Option<f64> {
    let widths: Vec<f64> = components
        .iter()
        .filter(|c| c.length_px >= BLOB_RATIO * c.width_px as usize)
        .map(|c| c.width_px as f64)
        .collect();
    if widths.is_empty() {
        None
    } else {
        Some(widths.iter().sum::<f64>() / widths.len() as f64)
    }
}

/// Rescales image (bilinear) and mask (nearest) so the measured mean wall
/// width becomes [`TARGET_WIDTH`].
pub fn normalize(image: &Raster, mask: &BitMask) -> Result<(Raster, BitMask, NormalizationResult)> {
    ensure!(
        (image.height(), image.width()) == mask.dims(),
        Shape,
        "image {}x{} and mask {:?} differ",
        image.height(),
        image.width(),
        mask.dims()
    );
    if mask.is_empty() {
        return Err(Error::UnusableFloorplan("mask has no wall pixels".into()));
    }
    let mean = mean_wall_width(&connected_components(mask))
        .ok_or_else(|| Error::UnusableFloorplan("no wall-like component to measure".into()))?;
    let norm = NormalizationResult::from_mean_width(mean)?;
    let img = rescale(image, norm.scale_factor, Resample::Bilinear)?;
    let m = rescale_mask(mask, norm.scale_factor)?;
    Ok((img, m, norm))
}

/// Deployment path: the scale comes from the mean of operator-annotated widths.
pub fn normalize_by_annotated_widths(image: &Raster, widths: &[f64]) -> Result<(Raster, NormalizationResult)> {
    let norm = annotated_normalization(widths)?;
    Ok((rescale(image, norm.scale_factor, Resample::Bilinear)?, norm))
}

pub fn annotated_normalization(widths: &[f64]) -> Result<NormalizationResult> {
    ensure!(
        widths.len() == CropTag::ALL.len(),
        InvalidArgument,
        "expected {} annotated widths, got {}",
        CropTag::ALL.len(),
        widths.len()
    );
    ensure!(
        widths.iter().all(|w| w.is_finite() && *w > 0.0),
        InvalidArgument,
        "annotated widths must be positive"
    );
    NormalizationResult::from_mean_width(widths.iter().sum::<f64>() / widths.len() as f64)
}
