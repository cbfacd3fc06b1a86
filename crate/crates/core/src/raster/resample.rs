use serde::{Deserialize, Serialize};

use super::{BitMask, Raster};
use crate::error::{ensure, Result};

pub const MIN_FACTOR: f64 = 0.05;
pub const MAX_FACTOR: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resample {
    Bilinear,
    Nearest,
}

fn scaled(dim: usize, factor: f64) -> usize {
    ((dim as f64 * factor).round() as usize).max(1)
}

/// Rescales by `factor` with pixel-centre alignment. A factor of exactly 1
/// returns an identical copy.
pub fn rescale(raster: &Raster, factor: f64, mode: Resample) -> Result<Raster> {
    ensure!(
        factor.is_finite() && (MIN_FACTOR..=MAX_FACTOR).contains(&factor),
        InvalidArgument,
        "scale factor {factor} outside [{MIN_FACTOR}, {MAX_FACTOR}]"
    );
    if factor == 1.0 {
        return Ok(raster.clone());
    }
    let (h, w, _) = raster.dims();
    resize(raster, scaled(h, factor), scaled(w, factor), mode)
}

/// Resamples to exactly `oh x ow` with pixel-centre alignment.
pub fn resize(raster: &Raster, oh: usize, ow: usize, mode: Resample) -> Result<Raster> {
    ensure!(oh > 0 && ow > 0, InvalidArgument, "cannot resize to {oh}x{ow}");
    let (h, w, c) = raster.dims();
    if (oh, ow) == (h, w) {
        return Ok(raster.clone());
    }
    let (sy, sx) = (h as f64 / oh as f64, w as f64 / ow as f64);
    let src = raster.data();
    let mut out = vec![0.0f32; oh * ow * c];
    match mode {
        Resample::Nearest => {
            let xs: Vec<usize> = (0..ow).map(|x| nearest(x, sx, w)).collect();
            for y in 0..oh {
                let ry = nearest(y, sy, h);
                for (x, &rx) in xs.iter().enumerate() {
                    let s = (ry * w + rx) * c;
                    let d = (y * ow + x) * c;
                    out[d..d + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
        Resample::Bilinear => {
            let xs: Vec<(usize, usize, f32)> = (0..ow).map(|x| taps(x, sx, w)).collect();
            for y in 0..oh {
                let (y0, y1, fy) = taps(y, sy, h);
                for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                    for ch in 0..c {
                        let p = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                        let top = p(y0, x0) + (p(y0, x1) - p(y0, x0)) * fx;
                        let bot = p(y1, x0) + (p(y1, x1) - p(y1, x0)) * fx;
                        out[(y * ow + x) * c + ch] = (top + (bot - top) * fy).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Raster::new(oh, ow, c, out)
}

fn nearest(dst: usize, step: f64, extent: usize) -> usize {
    (((dst as f64 + 0.5) * step) as usize).min(extent - 1)
}

fn taps(dst: usize, step: f64, extent: usize) -> (usize, usize, f32) {
    let s = ((dst as f64 + 0.5) * step - 0.5).max(0.0);
    let i0 = (s.floor() as usize).min(extent - 1);
    let i1 = (i0 + 1).min(extent - 1);
    (i0, i1, (s - i0 as f64) as f32)
}

/// Nearest-neighbour rescale of a mask through its 0/1 raster view.
pub fn rescale_mask(mask: &BitMask, factor: f64) -> Result<BitMask> {
    let r = rescale(&mask.to_raster(), factor, Resample::Nearest)?;
    Ok(BitMask::from_threshold(&r, 0.5))
}

/// Nearest-neighbour resize of a mask to exactly `oh x ow`.
pub fn resize_mask(mask: &BitMask, oh: usize, ow: usize) -> Result<BitMask> {
    let r = resize(&mask.to_raster(), oh, ow, Resample::Nearest)?;
    Ok(BitMask::from_threshold(&r, 0.5))
}

/// Rotates by `degrees` (counter-clockwise) about the centre onto a canvas
/// just large enough to hold every source pixel. Uncovered pixels take `fill`.
pub(crate) fn rotate_expand(raster: &Raster, degrees: f64, mode: Resample, fill: f32) -> Raster {
    let (h, w, c) = raster.dims();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let oh = ((h as f64 * cos.abs() + w as f64 * sin.abs()).ceil() as usize).max(1);
    let ow = ((w as f64 * cos.abs() + h as f64 * sin.abs()).ceil() as usize).max(1);
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let (ocy, ocx) = (oh as f64 / 2.0, ow as f64 / 2.0);
    let src = raster.data();
    let mut out = vec![fill; oh * ow * c];
    for y in 0..oh {
        for x in 0..ow {
            // Inverse map the output pixel centre into source coordinates.
            let dy = y as f64 + 0.5 - ocy;
            let dx = x as f64 + 0.5 - ocx;
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            let d = (y * ow + x) * c;
            match mode {
                Resample::Nearest => {
                    if sx >= 0.0 && sy >= 0.0 && sx < w as f64 && sy < h as f64 {
                        let s = (sy as usize * w + sx as usize) * c;
                        out[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
                Resample::Bilinear => {
                    let (fx, fy) = (sx - 0.5, sy - 0.5);
                    if fx < -0.5 || fy < -0.5 || fx > w as f64 - 0.5 || fy > h as f64 - 0.5 {
                        continue;
                    }
                    let x0 = fx.floor();
                    let y0 = fy.floor();
                    let (ax, ay) = ((fx - x0) as f32, (fy - y0) as f32);
                    let clampi = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
                    let (xa, xb) = (clampi(x0, w), clampi(x0 + 1.0, w));
                    let (ya, yb) = (clampi(y0, h), clampi(y0 + 1.0, h));
                    for ch in 0..c {
                        let p = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                        let top = p(ya, xa) + (p(ya, xb) - p(ya, xa)) * ax;
                        let bot = p(yb, xa) + (p(yb, xb) - p(yb, xa)) * ax;
                        out[d + ch] = (top + (bot - top) * ay).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Raster::new(oh, ow, c, out).expect("rotation keeps values in range")
}

pub(crate) fn rotate_mask_expand(mask: &BitMask, degrees: f64) -> BitMask {
    BitMask::from_threshold(&rotate_expand(&mask.to_raster(), degrees, Resample::Nearest, 0.0), 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::connected_components;
    use proptest::prelude::*;

    fn bar(h: usize, w: usize, t: usize) -> BitMask {
        BitMask::from_fn(h, w, |y, x| y >= 20 && y < 20 + t && x >= 10 && x < w - 10)
    }

    fn widest(m: &BitMask) -> u32 {
        let c = connected_components(m);
        c.iter().max_by_key(|c| c.pixel_count).map_or(0, |c| c.width_px)
    }

    #[test]
    fn identity_and_dims() {
        let r = Raster::from_fn(100, 100, |y, x| ((y * 7 + x) % 11) as f32 / 10.0);
        assert_eq!(rescale(&r, 1.0, Resample::Bilinear).unwrap(), r);
        let up = rescale(&r, 2.0, Resample::Bilinear).unwrap();
        assert_eq!((up.height(), up.width()), (200, 200));
        let tiny = rescale(&Raster::filled(3, 3, 1, 0.5), 0.05, Resample::Nearest).unwrap();
        assert_eq!((tiny.height(), tiny.width()), (1, 1));
    }

    #[test]
    fn factor_out_of_range() {
        let r = Raster::filled(4, 4, 1, 0.0);
        assert!(rescale(&r, 0.04, Resample::Nearest).is_err());
        assert!(rescale(&r, 20.5, Resample::Nearest).is_err());
        assert!(rescale(&r, f64::NAN, Resample::Nearest).is_err());
    }

    #[test]
    fn bar_width_scales() {
        let m = rescale_mask(&bar(60, 200, 10), 2.418).unwrap();
        let c = connected_components(&m);
        assert_eq!(c.len(), 1);
        assert!((c[0].width_px as i64 - 24).abs() <= 1, "width {}", c[0].width_px);
    }

    #[test]
    fn resize_hits_exact_dims() {
        let m = bar(60, 200, 10);
        let up = rescale_mask(&m, 1.37).unwrap();
        let back = resize_mask(&up, 60, 200).unwrap();
        assert_eq!(back.dims(), (60, 200));
        let diff = (0..60).flat_map(|y| (0..200).map(move |x| (y, x))).filter(|&(y, x)| back.get(y, x) != m.get(y, x)).count();
        assert!(diff <= 2 * 200, "{diff}");
    }

    #[test]
    fn constant_bilinear_stays_constant() {
        let r = Raster::filled(7, 9, 1, 0.3);
        let s = rescale(&r, 1.7, Resample::Bilinear).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn rotation_zero_keeps_mask_and_thirty_keeps_area() {
        let m = bar(120, 200, 12);
        assert_eq!(rotate_mask_expand(&m, 0.0), m);
        let r = rotate_mask_expand(&m, 30.0);
        let drift = (r.count() as f64 - m.count() as f64).abs() / m.count() as f64;
        assert!(drift < 0.05, "area drift {drift}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn round_trip_preserves_bar_width(t in 4usize..30, f in 0.5f64..3.0) {
            let m = bar(80, 240, t);
            let there = rescale(&m.to_raster(), f, Resample::Bilinear).unwrap();
            let back = BitMask::from_threshold(&rescale(&there, 1.0 / f, Resample::Bilinear).unwrap(), 0.5);
            prop_assert!((widest(&back) as i64 - t as i64).abs() <= 1, "{} vs {}", widest(&back), t);
        }

        #[test]
        fn nearest_up_then_down_preserves_bar_width(t in 4usize..30, f in 1.0f64..3.0) {
            let back = rescale_mask(&rescale_mask(&bar(80, 240, t), f).unwrap(), 1.0 / f).unwrap();
            prop_assert!((widest(&back) as i64 - t as i64).abs() <= 1, "{} vs {}", widest(&back), t);
        }
    }
}
