//! C ABI over the fgssnet segmenter.
//!
//! Every fallible function returns an [`FgssStatus`]; on failure the message
//! is kept per thread and can be copied out with [`fgss_last_error`].
//! Models are opaque handles created by [`fgss_model_load`] and released
//! with [`fgss_model_free`]. Images are row-major grayscale `float` buffers
//! in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use fgssnet::infer::{segment_floorplan, InferenceConfig};
use fgssnet::model::TileModel;
use fgssnet::pipeline::{normalize_by_annotated_widths, CropSidecar, WallCropSet};
use fgssnet::raster::{resize, resize_mask, Raster, Resample};
use fgssnet::segmenter::{count_parameters, SegmenterConfig};
use fgssnet::train::load_model;
use fgssnet::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FgssStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    UnusableFloorplan = 4,
    Checkpoint = 5,
    Io = 6,
    /// A Rust panic was caught at the boundary.
    Panic = 7,
}

/// A loaded segmenter, with its feature extractor for fgss variants.
pub struct FgssModel {
    inner: fgssnet::model::FgssModel,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> FgssStatus {
    match e {
        Error::Shape(_) => FgssStatus::ShapeMismatch,
        Error::InvalidArgument(_) | Error::Unsatisfiable(_) => FgssStatus::InvalidArgument,
        Error::UnusableFloorplan(_) => FgssStatus::UnusableFloorplan,
        Error::Checkpoint(_) | Error::Archive(_) | Error::Json(_) => FgssStatus::Checkpoint,
        _ => FgssStatus::Io,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (FgssStatus, String)>) -> FgssStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FgssStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside fgssnet".into());
            FgssStatus::Panic
        }
    }
}

fn lib<T>(r: fgssnet::Result<T>) -> Result<T, (FgssStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (FgssStatus, String) {
    (FgssStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (FgssStatus, String) {
    (FgssStatus::InvalidArgument, msg.into())
}

/// # Safety
/// `p` must be null or a NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (FgssStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length
/// in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn fgss_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fgss_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Loads the best weights of a segmenter checkpoint (directory or manifest
/// path). On success `*out` owns a handle for [`fgss_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fgss_model_load(path: *const c_char, out: *mut *mut FgssModel) -> FgssStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let path = str_arg(path, "path")?;
        let (inner, _) = lib(load_model(Path::new(path)))?;
        *out = Box::into_raw(Box::new(FgssModel { inner }));
        Ok(())
    })
}

/// Releases a handle from [`fgss_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a live handle not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fgss_model_free(model: *mut FgssModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Tile side of the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fgss_model_tile_side(model: *const FgssModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.tile_side())
}

/// 1 if segmentation needs a crop sidecar, 0 otherwise (or for null).
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fgss_model_requires_crops(model: *const FgssModel) -> i32 {
    model.as_ref().map_or(0, |m| m.inner.requires_crops() as i32)
}

/// Analytic parameter count of a named variant ("fgss16", "unet32-norec",
/// ...).
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fgss_parameter_count(name: *const c_char, out: *mut u64) -> FgssStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let name = str_arg(name, "name")?;
        let cfg = lib(SegmenterConfig::named(name))?;
        *out = lib(count_parameters(&cfg))?.total as u64;
        Ok(())
    })
}

/// Segments one floorplan.
///
/// `image` holds `height * width` grey values. `sidecar_json` is the crop
/// sidecar (`{floorplanId, crops: [{tag, x, y, side, widthPx}]}` in image
/// coordinates); it is required for fgss models and, when given, also sets
/// the width normalization. `stride` 0 selects the default of 30 px.
/// `probability` (may be null) receives `height * width` floats and `mask`
/// (may be null) `height * width` bytes of 0 or 1, both at input resolution.
///
/// # Safety
/// Buffers must be valid for `height * width` elements; strings must be
/// NUL-terminated or null.
#[no_mangle]
pub unsafe extern "C" fn fgss_segment(
    model: *const FgssModel,
    image: *const f32,
    height: usize,
    width: usize,
    sidecar_json: *const c_char,
    stride: usize,
    threshold: f32,
    probability: *mut f32,
    mask: *mut u8,
) -> FgssStatus {
    guard(|| {
        let model = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        if image.is_null() {
            return Err(null("image"));
        }
        if height == 0 || width == 0 {
            return Err(invalid("image dimensions must be positive"));
        }
        let n = height.checked_mul(width).ok_or_else(|| invalid("image too large"))?;
        let data = std::slice::from_raw_parts(image, n).to_vec();
        let original = lib(Raster::new(height, width, 1, data))?;
        let (img, crops) = if sidecar_json.is_null() {
            if model.requires_crops() {
                return Err(invalid("this model needs a crop sidecar"));
            }
            (original.clone(), None)
        } else {
            let json = str_arg(sidecar_json, "sidecar_json")?;
            let sidecar: CropSidecar =
                serde_json::from_str(json).map_err(|e| invalid(format!("sidecar: {e}")))?;
            let (img, norm) = lib(normalize_by_annotated_widths(&original, &sidecar.widths()))?;
            let set = lib(WallCropSet::from_sidecar(&img, &sidecar, norm.scale_factor))?;
            (img, Some(set))
        };
        let cfg = InferenceConfig {
            stride: if stride == 0 { fgssnet::infer::DEFAULT_STRIDE } else { stride },
            threshold: threshold as f64,
            tile_side: model.tile_side(),
            parallel: true,
        };
        let crops = if model.requires_crops() { crops } else { None };
        let seg = lib(segment_floorplan(&img, crops.as_ref(), model, &cfg))?;
        if !probability.is_null() {
            let p = lib(resize(&seg.probability, height, width, Resample::Bilinear))?;
            std::ptr::copy_nonoverlapping(p.data().as_ptr(), probability, n);
        }
        if !mask.is_null() {
            let m = lib(resize_mask(&seg.mask, height, width))?;
            let out = std::slice::from_raw_parts_mut(mask, n);
            for (o, &b) in out.iter_mut().zip(m.bits()) {
                *o = b as u8;
            }
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;

    fn last_error() -> String {
        let mut buf = vec![0 as c_char; 256];
        let n = unsafe { fgss_last_error(buf.as_mut_ptr(), buf.len()) };
        let s = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_string();
        assert_eq!(s.len(), n.min(255));
        s
    }

    #[test]
    fn parameter_count_matches_core() {
        let name = CString::new("unet32").unwrap();
        let mut n = 0u64;
        assert_eq!(unsafe { fgss_parameter_count(name.as_ptr(), &mut n) }, FgssStatus::Ok);
        assert_eq!(n, 553_701_281);
        let bad = CString::new("resnet").unwrap();
        assert_eq!(
            unsafe { fgss_parameter_count(bad.as_ptr(), &mut n) },
            FgssStatus::InvalidArgument
        );
        assert!(last_error().contains("resnet"));
    }

    #[test]
    fn null_arguments_are_reported() {
        let mut m = std::ptr::null_mut();
        assert_eq!(unsafe { fgss_model_load(std::ptr::null(), &mut m) }, FgssStatus::NullPointer);
        assert!(m.is_null());
        assert!(last_error().contains("path"));
        let status = unsafe {
            fgss_segment(std::ptr::null(), std::ptr::null(), 1, 1, std::ptr::null(), 0, 0.5, std::ptr::null_mut(), std::ptr::null_mut())
        };
        assert_eq!(status, FgssStatus::NullPointer);
        assert_eq!(unsafe { fgss_model_tile_side(std::ptr::null()) }, 0);
        unsafe { fgss_model_free(std::ptr::null_mut()) };
    }

    #[test]
    fn missing_checkpoint_is_io() {
        let p = CString::new("/nonexistent/ckpt").unwrap();
        let mut m = std::ptr::null_mut();
        assert_eq!(unsafe { fgss_model_load(p.as_ptr(), &mut m) }, FgssStatus::Io);
        assert!(m.is_null());
    }

    #[test]
    fn error_buffer_truncates() {
        set_error("abcdef".into());
        let mut buf = [0 as c_char; 4];
        assert_eq!(unsafe { fgss_last_error(buf.as_mut_ptr(), 4) }, 6);
        assert_eq!(unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap(), "abc");
        assert_eq!(unsafe { fgss_last_error(std::ptr::null_mut(), 0) }, 6);
    }

    #[test]
    fn version_is_nul_terminated() {
        let v = unsafe { CStr::from_ptr(fgss_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }
}
