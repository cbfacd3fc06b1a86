//! Sliding-window segmentation of whole floorplans with overlap averaging.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::featx::LatentBlock;
use crate::model::TileModel;
use crate::nn::layers::sigmoid;
use crate::pipeline::WallCropSet;
use crate::raster::{iou, BitMask, Raster};

pub const DEFAULT_STRIDE: usize = 30;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Tiles evaluated together before their outputs are merged.
const CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct InferenceConfig {
    pub stride: usize,
    pub threshold: f64,
    pub tile_side: usize,
    /// Evaluate tiles on the rayon pool. Results do not depend on it.
    pub parallel: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            stride: DEFAULT_STRIDE,
            threshold: DEFAULT_THRESHOLD,
            tile_side: 256,
            parallel: true,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.stride >= 1 && self.stride <= self.tile_side,
            InvalidArgument,
            "stride {} outside [1, {}]",
            self.stride,
            self.tile_side
        );
        ensure!(
            (0.0..=1.0).contains(&self.threshold),
            InvalidArgument,
            "threshold {} outside [0, 1]",
            self.threshold
        );
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TileGrid {
    pub tile_side: usize,
    pub padded_height: usize,
    pub padded_width: usize,
    /// Top-left `(y, x)` of every tile, row-major.
    pub offsets: Vec<(usize, usize)>,
}

fn axis_offsets(padded: usize, tile: usize, stride: usize) -> Vec<usize> {
    let last = padded - tile;
    let mut v: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o < last).collect();
    v.push(last);
    v
}

/// Tile offsets at `stride` spacing, the last row and column clamped to end
/// on the padded boundary. Images smaller than a tile are padded up to one.
pub fn plan_tile_grid(height: usize, width: usize, config: &InferenceConfig) -> Result<TileGrid> {
    config.validate()?;
    ensure!(height > 0 && width > 0, InvalidArgument, "empty image {height}x{width}");
    let t = config.tile_side;
    let (ph, pw) = (height.max(t), width.max(t));
    let ys = axis_offsets(ph, t, config.stride);
    let xs = axis_offsets(pw, t, config.stride);
    Ok(TileGrid {
        tile_side: t,
        padded_height: ph,
        padded_width: pw,
        offsets: ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect(),
    })
}

impl TileGrid {
    /// Number of tiles covering each pixel of the padded canvas.
    pub fn coverage(&self) -> Vec<u32> {
        let mut c = vec![0u32; self.padded_height * self.padded_width];
        for &(y0, x0) in &self.offsets {
            for y in y0..y0 + self.tile_side {
                c[y * self.padded_width + x0..y * self.padded_width + x0 + self.tile_side]
                    .iter_mut()
                    .for_each(|v| *v += 1);
            }
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub mask: BitMask,
    /// Averaged wall probability, same dims as the input image.
    pub probability: Raster,
    pub tiles: usize,
}

/// Per-pixel probability sums and tile counts over the padded canvas.
#[derive(Clone, Debug)]
pub struct Accumulator {
    width: usize,
    pub sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl Accumulator {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            width,
            sum: vec![0.0; height * width],
            count: vec![0; height * width],
        }
    }

    pub fn add_tile(&mut self, y0: usize, x0: usize, side: usize, logits: &[f32]) {
        for ty in 0..side {
            let row = (y0 + ty) * self.width + x0;
            for tx in 0..side {
                self.sum[row + tx] += sigmoid(logits[ty * side + tx] as f64);
                self.count[row + tx] += 1;
            }
        }
    }
}

/// Segments `image` with a precomputed injected latent.
pub fn segment_with_latent<M: TileModel + ?Sized>(
    image: &Raster,
    injected: Option<&LatentBlock>,
    model: &M,
    config: &InferenceConfig,
) -> Result<Segmentation> {
    ensure!(
        config.tile_side == model.tile_side(),
        InvalidArgument,
        "inference tile side {} does not match the model's {}",
        config.tile_side,
        model.tile_side()
    );
    let gray = image.to_gray();
    let (h, w) = (gray.height(), gray.width());
    let grid = plan_tile_grid(h, w, config)?;
    let t = grid.tile_side;
    let mut acc = Accumulator::new(grid.padded_height, grid.padded_width);
    // Chunks are evaluated (possibly in parallel) and merged in grid order, so
    // the sums do not depend on scheduling.
    for chunk in grid.offsets.chunks(CHUNK) {
        let run = |&(y, x): &(usize, usize)| model.tile_logits(&gray.window(y, x, t, t, 0.0), injected);
        let outs: Vec<Result<Vec<f32>>> = if config.parallel {
            chunk.par_iter().map(run).collect()
        } else {
            chunk.iter().map(run).collect()
        };
        for (&(y, x), out) in chunk.iter().zip(outs) {
            let logits = out?;
            ensure!(logits.len() == t * t, Shape, "model returned {} logits for a {t}x{t} tile", logits.len());
            acc.add_tile(y, x, t, &logits);
        }
    }
    let pw = grid.padded_width;
    let prob: Vec<f32> = (0..h * w)
        .map(|i| {
            let j = (i / w) * pw + i % w;
            (acc.sum[j] / acc.count[j] as f64) as f32
        })
        .collect();
    let probability = Raster::new(h, w, 1, prob)?;
    Ok(Segmentation {
        mask: BitMask::from_threshold(&probability, config.threshold as f32),
        probability,
        tiles: grid.offsets.len(),
    })
}

/// Segments a (width-normalized) floorplan. The injected latent is computed
/// once from `crops` and reused for every tile.
pub fn segment_floorplan<M: TileModel + ?Sized>(
    image: &Raster,
    crops: Option<&WallCropSet>,
    model: &M,
    config: &InferenceConfig,
) -> Result<Segmentation> {
    let injected = model.prepare(crops)?;
    segment_with_latent(image, injected.as_ref(), model, config)
}

/// Colour blended over wall pixels in [`overlay`].
pub const OVERLAY_COLOR: [f32; 3] = [1.0, 0.0, 0.0];
pub const OVERLAY_ALPHA: f32 = 0.5;

/// RGB copy of `image` with [`OVERLAY_COLOR`] alpha-blended over the mask.
pub fn overlay(image: &Raster, mask: &BitMask) -> Result<Raster> {
    let gray = image.to_gray();
    ensure!(
        (gray.height(), gray.width()) == mask.dims(),
        Shape,
        "image {}x{} and mask {:?} differ",
        gray.height(),
        gray.width(),
        mask.dims()
    );
    let data = gray
        .data()
        .iter()
        .zip(mask.bits())
        .flat_map(|(&v, &wall)| {
            OVERLAY_COLOR.map(|c| if wall { (1.0 - OVERLAY_ALPHA) * v + OVERLAY_ALPHA * c } else { v })
        })
        .collect();
    Raster::new(gray.height(), gray.width(), 3, data)
}

/// One image of a stride sweep.
pub struct SweepItem<'a> {
    pub image: &'a Raster,
    pub truth: &'a BitMask,
    pub crops: Option<&'a WallCropSet>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SweepRow {
    pub stride: usize,
    pub mean_iou: f64,
    pub wall_clock_ms: f64,
    pub tiles: usize,
}

/// Mean IoU and total segmentation time per stride. Injected latents are
/// computed up front so the timing covers only the tile walk.
pub fn stride_sweep<M: TileModel + ?Sized>(
    items: &[SweepItem<'_>],
    model: &M,
    strides: &[usize],
    base: &InferenceConfig,
) -> Result<Vec<SweepRow>> {
    ensure!(!items.is_empty(), InvalidArgument, "stride sweep needs at least one image");
    let latents = items
        .iter()
        .map(|it| model.prepare(it.crops))
        .collect::<Result<Vec<_>>>()?;
    strides
        .iter()
        .map(|&stride| {
            let cfg = InferenceConfig { stride, ..*base };
            let mut ious = Vec::with_capacity(items.len());
            let mut tiles = 0;
            let start = Instant::now();
            for (it, z) in items.iter().zip(&latents) {
                let s = segment_with_latent(it.image, z.as_ref(), model, &cfg)?;
                tiles += s.tiles;
                ious.push(iou(&s.mask, it.truth)?);
            }
            Ok(SweepRow {
                stride,
                mean_iou: ious.iter().sum::<f64>() / ious.len() as f64,
                wall_clock_ms: start.elapsed().as_secs_f64() * 1e3,
                tiles,
            })
        })
        .collect()
}
