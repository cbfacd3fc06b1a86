use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};

use super::{BitMask, Raster};
use crate::error::{Error, Result};

/// Decodes PNG or JPEG bytes into a grayscale raster (colour inputs go
/// through luma conversion).
pub fn decode_image(bytes: &[u8]) -> Result<Raster> {
    let img = image::load_from_memory(bytes)?;
    let g = img.to_luma8();
    let (w, h) = g.dimensions();
    let data = g.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Raster::new(h as usize, w as usize, 1, data)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_image(&bytes)
}

/// Reads a mask PNG; pixels brighter than mid-grey are walls.
pub fn read_mask(path: impl AsRef<Path>) -> Result<BitMask> {
    Ok(BitMask::from_threshold(&read_image(path)?, 0.5))
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit PNG (`round(255 v)`), RGB for 3-channel rasters, grey otherwise.
pub fn encode_png(raster: &Raster) -> Result<Vec<u8>> {
    let (h, w, c) = raster.dims();
    let mut buf = Cursor::new(Vec::new());
    if c == 3 {
        let px = raster.data().iter().map(|&v| quantize(v)).collect();
        RgbImage::from_raw(w as u32, h as u32, px)
            .expect("buffer matches dims")
            .write_to(&mut buf, ImageFormat::Png)?;
    } else {
        let px = raster.to_gray().data().iter().map(|&v| quantize(v)).collect();
        GrayImage::from_raw(w as u32, h as u32, px)
            .expect("buffer matches dims")
            .write_to(&mut buf, ImageFormat::Png)?;
    }
    Ok(buf.into_inner())
}

/// Mask as 8-bit grey PNG with values {0, 255}.
pub fn encode_mask_png(mask: &BitMask) -> Result<Vec<u8>> {
    encode_png(&mask.to_raster())
}

pub fn write_png(raster: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_png(raster)?).map_err(|e| Error::file(path, e))
}

pub fn write_mask(mask: &BitMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_mask_png(mask)?).map_err(|e| Error::file(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_png_round_trip() {
        let m = BitMask::from_fn(9, 13, |y, x| (y * x) % 3 == 0);
        let bytes = encode_mask_png(&m).unwrap();
        let g = image::load_from_memory(&bytes).unwrap().to_luma8();
        assert!(g.as_raw().iter().all(|&v| v == 0 || v == 255));
        assert_eq!(BitMask::from_threshold(&decode_image(&bytes).unwrap(), 0.5), m);
    }

    #[test]
    fn gray_png_round_trip_is_exact_on_8bit_levels() {
        let r = Raster::from_fn(5, 6, |y, x| ((y * 6 + x) * 8) as f32 / 255.0);
        let back = decode_image(&encode_png(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn rgb_is_converted_to_gray() {
        let r = Raster::new(1, 1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        let back = decode_image(&encode_png(&r).unwrap()).unwrap();
        assert_eq!(back.dims(), (1, 1, 1));
        assert_eq!(back.get(0, 0), 1.0);
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(decode_image(b"not an image").is_err());
    }
}
