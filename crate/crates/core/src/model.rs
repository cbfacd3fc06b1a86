//! A deployable network: the segmenter plus, for fgss variants, the frozen
//! feature extractor that turns a crop set into the injected latent.

use crate::error::{ensure, Error, Result};
use crate::featx::{FeatureExtractor, LatentBlock};
use crate::pipeline::WallCropSet;
use crate::raster::Raster;
use crate::segmenter::{Segmenter, Variant};

/// Anything that maps a tile to per-pixel logits. Implemented by
/// [`FgssModel`] and by test stubs.
pub trait TileModel: Sync {
    fn tile_side(&self) -> usize;

    fn requires_crops(&self) -> bool;

    /// Injected latent for a floorplan; `None` for models without injection.
    fn prepare(&self, crops: Option<&WallCropSet>) -> Result<Option<LatentBlock>>;

    /// Row-major logits of one `tile_side`-square tile.
    fn tile_logits(&self, tile: &Raster, injected: Option<&LatentBlock>) -> Result<Vec<f32>>;
}

#[derive(Clone, Debug)]
pub struct FgssModel {
    pub segmenter: Segmenter<f32>,
    pub featx: Option<FeatureExtractor<f32>>,
}

impl FgssModel {
    pub fn new(segmenter: Segmenter<f32>, featx: Option<FeatureExtractor<f32>>) -> Result<Self> {
        let cfg = segmenter.config();
        match (cfg.variant, &featx) {
            (Variant::Fgss, None) => {
                return Err(Error::InvalidArgument("fgss model needs a feature extractor".into()))
            }
            (Variant::Fgss, Some(f)) => ensure!(
                Some(f.config()) == cfg.featx.as_ref(),
                InvalidArgument,
                "feature extractor config does not match the one the segmenter was built for"
            ),
            (Variant::Unet, _) => {}
        }
        let featx = if cfg.variant == Variant::Unet { None } else { featx };
        Ok(Self { segmenter, featx })
    }

    pub fn variant(&self) -> Variant {
        self.segmenter.config().variant
    }
}

impl TileModel for FgssModel {
    fn tile_side(&self) -> usize {
        self.segmenter.config().tile_side
    }

    fn requires_crops(&self) -> bool {
        self.featx.is_some()
    }

    fn prepare(&self, crops: Option<&WallCropSet>) -> Result<Option<LatentBlock>> {
        match (&self.featx, crops) {
            (Some(f), Some(c)) => Ok(Some(f.encode_crop_set(c)?)),
            (Some(_), None) => Err(Error::InvalidArgument("fgss model needs a wall crop set".into())),
            (None, _) => Ok(None),
        }
    }

    fn tile_logits(&self, tile: &Raster, injected: Option<&LatentBlock>) -> Result<Vec<f32>> {
        Ok(self.segmenter.forward_tile(tile, injected)?.logits.into_vec())
    }
}

/// A bare segmenter; the caller supplies the injected latent.
impl TileModel for Segmenter<f32> {
    fn tile_side(&self) -> usize {
        self.config().tile_side
    }

    fn requires_crops(&self) -> bool {
        false
    }

    fn prepare(&self, _: Option<&WallCropSet>) -> Result<Option<LatentBlock>> {
        Ok(None)
    }

    fn tile_logits(&self, tile: &Raster, injected: Option<&LatentBlock>) -> Result<Vec<f32>> {
        Ok(self.forward_tile(tile, injected)?.logits.into_vec())
    }
}
