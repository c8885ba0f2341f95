//! C ABI over the `dsnet` library.
//!
//! Models are opaque handles created by [`dsnet_model_load`] and released by
//! [`dsnet_model_free`]. Every fallible function returns a [`DsnetStatus`];
//! on failure a description is available from [`dsnet_last_error`] until the
//! next call on the same thread. Images cross the boundary as planar,
//! row-major arrays of values in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use dsnet::checkpoint::Checkpoint;
use dsnet::metrics;
use dsnet::model::Network;
use dsnet::pipeline::predict;
use dsnet::types::{ImagePlane, PlaneKind};
use dsnet::Error;
use ndarray::{Array2, Array3};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsnetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    MissingCheckpoint = 4,
    InvalidCheckpoint = 5,
    Io = 6,
    EmptyGroundTruth = 7,
    Internal = 8,
    Panic = 9,
}

/// A loaded student network.
pub struct DsnetModel {
    net: Network,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> DsnetStatus {
    match e {
        Error::ShapeMismatch { .. } | Error::InputTooSmall { .. } => DsnetStatus::ShapeMismatch,
        Error::MissingCheckpoint(_) => DsnetStatus::MissingCheckpoint,
        Error::InvalidCheckpoint(_) | Error::Config(_) => DsnetStatus::InvalidCheckpoint,
        Error::Io(_) | Error::UnreadableImage { .. } => DsnetStatus::Io,
        Error::EmptyGroundTruth => DsnetStatus::EmptyGroundTruth,
        Error::OutOfRange { .. } => DsnetStatus::InvalidArgument,
        _ => DsnetStatus::Internal,
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (DsnetStatus, String)>) -> DsnetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DsnetStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("panic inside dsnet");
            DsnetStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (DsnetStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (DsnetStatus, String) {
    (DsnetStatus::NullPointer, format!("{what} is null"))
}

/// Message describing the last failure on this thread; empty after a
/// successful call. The pointer stays valid until the next call.
#[no_mangle]
pub extern "C" fn dsnet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dsnet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads the student network of a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dsnet_model_load(path: *const c_char, out: *mut *mut DsnetModel) -> DsnetStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (DsnetStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let ckpt = Checkpoint::load(Path::new(path)).map_err(lib_err)?;
        let net = ckpt.student_network().map_err(lib_err)?;
        *out = Box::into_raw(Box::new(DsnetModel { net }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`dsnet_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dsnet_model_free(model: *mut DsnetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length images are resized to internally.
///
/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dsnet_model_input_size(model: *const DsnetModel, out: *mut usize) -> DsnetStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = model.net.model.input_size();
        Ok(())
    })
}

fn plane(kind: PlaneKind, data: &[f32], channels: usize, h: usize, w: usize) -> Result<ImagePlane, (DsnetStatus, String)> {
    let arr = Array3::from_shape_vec((channels, h, w), data.to_vec())
        .map_err(|e| (DsnetStatus::ShapeMismatch, e.to_string()))?;
    ImagePlane::new(kind, arr).map_err(lib_err)
}

/// Predicts saliency for one image of `height x width` pixels.
///
/// `rgb` holds `3 * height * width` values (planar R, G, B). `depth`, if not
/// null, holds `height * width` values; when null the model's depth branch
/// estimates depth. `saliency_out` receives `height * width` values and
/// `depth_out`, if not null, the depth map that was used.
///
/// # Safety
/// All non-null pointers must reference buffers of the sizes above.
#[no_mangle]
pub unsafe extern "C" fn dsnet_model_infer(
    model: *const DsnetModel,
    rgb: *const f32,
    depth: *const f32,
    height: usize,
    width: usize,
    saliency_out: *mut f32,
    depth_out: *mut f32,
) -> DsnetStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        if saliency_out.is_null() {
            return Err(null("saliency_out"));
        }
        if height == 0 || width == 0 {
            return Err((DsnetStatus::InvalidArgument, "empty image".into()));
        }
        let area = height * width;
        let rgb = plane(PlaneKind::Rgb, std::slice::from_raw_parts(rgb, 3 * area), 3, height, width)?;
        let depth = if depth.is_null() {
            None
        } else {
            Some(plane(PlaneKind::Depth, std::slice::from_raw_parts(depth, area), 1, height, width)?)
        };
        let pair = predict(&model.net.model, &rgb, depth.as_ref()).map_err(lib_err)?;
        let sal = std::slice::from_raw_parts_mut(saliency_out, area);
        sal.iter_mut().zip(pair.saliency.data().iter()).for_each(|(o, v)| *o = *v);
        if !depth_out.is_null() {
            let d = std::slice::from_raw_parts_mut(depth_out, area);
            d.iter_mut().zip(pair.depth.data().iter()).for_each(|(o, v)| *o = *v);
        }
        Ok(())
    })
}

unsafe fn maps(pred: *const f64, gt: *const f64, h: usize, w: usize) -> Result<(Array2<f64>, Array2<f64>), (DsnetStatus, String)> {
    if pred.is_null() {
        return Err(null("pred"));
    }
    if gt.is_null() {
        return Err(null("gt"));
    }
    if h == 0 || w == 0 {
        return Err((DsnetStatus::InvalidArgument, "empty map".into()));
    }
    let load = |p: *const f64| {
        Array2::from_shape_vec((h, w), std::slice::from_raw_parts(p, h * w).to_vec()).expect("sized buffer")
    };
    Ok((load(pred), load(gt)))
}

unsafe fn metric(
    pred: *const f64,
    gt: *const f64,
    h: usize,
    w: usize,
    out: *mut f64,
    f: impl FnOnce(&Array2<f64>, &Array2<f64>) -> dsnet::Result<f64>,
) -> DsnetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (p, g) = maps(pred, gt, h, w)?;
        *out = f(&p, &g).map_err(lib_err)?;
        Ok(())
    })
}

/// Mean absolute error between a saliency map and a binary mask, both
/// `h x w`.
///
/// # Safety
/// `pred` and `gt` must hold `h * w` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dsnet_mae(pred: *const f64, gt: *const f64, h: usize, w: usize, out: *mut f64) -> DsnetStatus {
    metric(pred, gt, h, w, out, metrics::mae)
}

/// Structure measure with equal object/region balance.
///
/// # Safety
/// As for [`dsnet_mae`].
#[no_mangle]
pub unsafe extern "C" fn dsnet_s_measure(pred: *const f64, gt: *const f64, h: usize, w: usize, out: *mut f64) -> DsnetStatus {
    metric(pred, gt, h, w, out, |p, g| metrics::s_measure(p, g, 0.5))
}

/// Maximum F-measure (beta^2 = 0.3, 256 thresholds).
///
/// # Safety
/// As for [`dsnet_mae`].
#[no_mangle]
pub unsafe extern "C" fn dsnet_f_measure_max(pred: *const f64, gt: *const f64, h: usize, w: usize, out: *mut f64) -> DsnetStatus {
    metric(pred, gt, h, w, out, |p, g| {
        metrics::f_measure_max(p, g, metrics::DEFAULT_BETA_SQ, metrics::DEFAULT_THRESHOLDS)
    })
}

/// Maximum enhanced-alignment measure (256 thresholds).
///
/// # Safety
/// As for [`dsnet_mae`].
#[no_mangle]
pub unsafe extern "C" fn dsnet_e_measure_max(pred: *const f64, gt: *const f64, h: usize, w: usize, out: *mut f64) -> DsnetStatus {
    metric(pred, gt, h, w, out, |p, g| metrics::e_measure_max(p, g, metrics::DEFAULT_THRESHOLDS))
}

/// Reads the first channel of an image file into `out`, which must hold
/// `height * width` values; the file's size is reported through
/// `height`/`width` when `out` is null.
///
/// # Safety
/// `path` must be NUL-terminated; `height` and `width` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dsnet_read_gray(
    path: *const c_char,
    out: *mut f64,
    height: *mut usize,
    width: *mut usize,
) -> DsnetStatus {
    guard(|| {
        if path.is_null() || height.is_null() || width.is_null() {
            return Err(null("argument"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (DsnetStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let img = dsnet::imageio::read_gray(Path::new(path)).map_err(lib_err)?;
        let (h, w) = img.values.dim();
        if !out.is_null() {
            if (*height, *width) != (h, w) {
                return Err((
                    DsnetStatus::ShapeMismatch,
                    format!("buffer is {}x{}, image is {h}x{w}", *height, *width),
                ));
            }
            let dst = std::slice::from_raw_parts_mut(out, h * w);
            for (o, v) in dst.iter_mut().zip(img.values.iter()) {
                *o = v / img.full_scale;
            }
        }
        *height = h;
        *width = w;
        Ok(())
    })
}
