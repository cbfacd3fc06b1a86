//! Raster and mask types plus the exact analysis operations built on them.

mod components;
mod io;
mod resample;

pub use components::{connected_components, estimate_wall_width, Orientation, WallComponent};
pub use io::{decode_image, encode_mask_png, encode_png, read_image, read_mask, write_mask, write_png};
pub use resample::{resize, resize_mask, rescale, rescale_mask, Resample};
pub(crate) use resample::{rotate_expand, rotate_mask_expand};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nn::{Scalar, Tensor};

/// Floating point image in `[0, 1]`, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(channels > 0, InvalidArgument, "raster needs at least one channel");
        ensure!(
            data.len() == height * width * channels,
            Shape,
            "{height}x{width}x{channels} raster needs {} values, got {}",
            height * width * channels,
            data.len()
        );
        ensure!(
            data.iter().all(|v| (0.0..=1.0).contains(v)),
            InvalidArgument,
            "raster values must lie in [0, 1]"
        );
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, v: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![v.clamp(0.0, 1.0); height * width * channels],
        }
    }

    /// Single-channel raster from a per-pixel function (values are clamped).
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x).clamp(0.0, 1.0));
            }
        }
        Self {
            height,
            width,
            channels: 1,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels]
    }

    pub fn get_c(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        let c = self.channels;
        let i = (y * self.width + x) * c;
        self.data[i..i + c].iter_mut().for_each(|d| *d = v.clamp(0.0, 1.0));
    }

    /// Converts to a single-channel raster (luma weights for 3 channels,
    /// plain mean otherwise).
    pub fn to_gray(&self) -> Raster {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks(self.channels)
            .map(|px| {
                if px.len() == 3 {
                    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
                } else {
                    px.iter().sum::<f32>() / px.len() as f32
                }
            })
            .collect();
        Raster {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Copy of the `side x side` window at `bbox`; errors when it leaves the raster.
    pub fn crop(&self, bbox: CropBox) -> Result<Raster> {
        ensure!(
            bbox.fits(self.height, self.width),
            InvalidArgument,
            "crop {bbox:?} exceeds {}x{} raster",
            self.height,
            self.width
        );
        Ok(self.window(bbox.y, bbox.x, bbox.side, bbox.side, 0.0))
    }

    /// `h x w` window at `(y0, x0)`; pixels outside the raster take `fill`.
    pub fn window(&self, y0: usize, x0: usize, h: usize, w: usize, fill: f32) -> Raster {
        let c = self.channels;
        let mut data = vec![fill; h * w * c];
        let ys = y0.min(self.height)..(y0 + h).min(self.height);
        let xe = (x0 + w).min(self.width);
        if x0 < xe {
            for y in ys {
                let src = &self.data[(y * self.width + x0) * c..(y * self.width + xe) * c];
                let dst = ((y - y0) * w) * c;
                data[dst..dst + src.len()].copy_from_slice(src);
            }
        }
        Raster {
            height: h,
            width: w,
            channels: c,
            data,
        }
    }

    /// `[1, C, H, W]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let (h, w, c) = self.dims();
        let mut out = Vec::with_capacity(self.data.len());
        for ch in 0..c {
            for i in 0..h * w {
                out.push(T::lit(self.data[i * c + ch] as f64));
            }
        }
        Tensor::from_vec([1, c, h, w], out)
    }

    /// Raster view of sample `i` of a tensor, clamped into `[0, 1]`.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, i: usize) -> Result<Raster> {
        ensure!(i < t.n(), Shape, "sample {i} out of range");
        let (c, h, w) = (t.c(), t.h(), t.w());
        let s = t.sample(i);
        let mut data = vec![0.0f32; c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                data[p * c + ch] = s[ch * h * w + p].to_f32().unwrap_or(0.0).clamp(0.0, 1.0);
            }
        }
        Raster::new(h, w, c, data)
    }
}

/// Binary wall mask (`true` = wall).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BitMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        ensure!(
            bits.len() == height * width,
            Shape,
            "{height}x{width} mask needs {} bits, got {}",
            height * width,
            bits.len()
        );
        Ok(Self { height, width, bits })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        Self { height, width, bits }
    }

    /// Pixels strictly above `threshold` become wall.
    pub fn from_threshold(r: &Raster, threshold: f32) -> Self {
        let g = r.to_gray();
        Self {
            height: g.height,
            width: g.width,
            bits: g.data.iter().map(|&v| v > threshold).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// 0/1 raster view.
    pub fn to_raster(&self) -> Raster {
        Raster {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// `h x w` window at `(y0, x0)`; outside pixels are background.
    pub fn window(&self, y0: usize, x0: usize, h: usize, w: usize) -> BitMask {
        BitMask::from_fn(h, w, |y, x| {
            let (sy, sx) = (y0 + y, x0 + x);
            sy < self.height && sx < self.width && self.get(sy, sx)
        })
    }
}

/// Square crop window, top-left anchored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropBox {
    pub x: usize,
    pub y: usize,
    pub side: usize,
}

impl CropBox {
    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.x + self.side <= width && self.y + self.side <= height
    }

    /// Box of `side` centred on `(cy, cx)` and shifted to lie inside the
    /// raster. Rasters smaller than `side` pin the box at the origin.
    pub fn centered_clamped(cy: usize, cx: usize, side: usize, height: usize, width: usize) -> Self {
        let half = side / 2;
        let clamp = |c: usize, extent: usize| c.saturating_sub(half).min(extent.saturating_sub(side));
        Self {
            x: clamp(cx, width),
            y: clamp(cy, height),
            side,
        }
    }
}

/// Intersection over union. Two empty masks score 1.
pub fn iou(predicted: &BitMask, ground_truth: &BitMask) -> Result<f64> {
    ensure!(
        predicted.dims() == ground_truth.dims(),
        Shape,
        "iou of {:?} and {:?} masks",
        predicted.dims(),
        ground_truth.dims()
    );
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in predicted.bits.iter().zip(&ground_truth.bits) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}
