//! C ABI over a trained `hcanet` checkpoint.
//!
//! Every call returns an [`HcaStatus`]; on failure the message is available
//! from [`hca_last_error_message`] on the same thread. Models are opaque
//! handles released with [`hca_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use hcanet::checkpoint::Checkpoint;
use hcanet::predict::predict_image;
use hcanet::{HcaError, Model, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HcaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Ingestion = 4,
    VersionMismatch = 5,
    Shape = 6,
    Runtime = 7,
    Panic = 8,
}

/// Opaque model handle.
pub struct HcaModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("no interior nul"));
}

fn status_of(e: &HcaError) -> HcaStatus {
    match e {
        HcaError::Io { .. } => HcaStatus::Io,
        HcaError::Ingestion { .. } => HcaStatus::Ingestion,
        HcaError::VersionMismatch { .. } => HcaStatus::VersionMismatch,
        HcaError::Shape(_) => HcaStatus::Shape,
        HcaError::Config(_) | HcaError::InputDomain(_) | HcaError::NumericInput(_) => {
            HcaStatus::InvalidArgument
        }
        _ => HcaStatus::Runtime,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (HcaStatus, String)>) -> HcaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            HcaStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            HcaStatus::Panic
        }
    }
}

fn fail(e: HcaError) -> (HcaStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (HcaStatus, String) {
    (HcaStatus::NullPointer, format!("{what} is null"))
}

/// Loads a checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hca_model_load(path: *const c_char, out: *mut *mut HcaModel) -> HcaStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (HcaStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let ckpt = Checkpoint::load(Path::new(path)).map_err(fail)?;
        let model = Model::from_parts(&ckpt.config.model, ckpt.params).map_err(fail)?;
        *out = Box::into_raw(Box::new(HcaModel { model }));
        Ok(())
    })
}

/// Releases a handle from [`hca_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hca_model_free(model: *mut HcaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Network input height and width.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn hca_model_input_size(
    model: *const HcaModel,
    height: *mut usize,
    width: *mut usize,
) -> HcaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if height.is_null() || width.is_null() {
            return Err(null("height/width"));
        }
        let (h, w) = m.model.config().input_size;
        *height = h;
        *width = w;
        Ok(())
    })
}

/// Number of disc channels the model predicts.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn hca_model_num_discs(model: *const HcaModel, out: *mut usize) -> HcaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.model.config().num_discs;
        Ok(())
    })
}

/// Predicts discs for a row-major `height x width` image in `[0, 1]`.
/// Coordinates are in the input image's pixels; undetected discs get
/// `(-1, -1)` and `visible = 0`. Every output array holds `len` entries,
/// which must equal the model's disc count.
///
/// # Safety
/// `pixels` must hold `height * width` values; each output array `len`.
#[no_mangle]
pub unsafe extern "C" fn hca_model_predict(
    model: *const HcaModel,
    pixels: *const f64,
    height: usize,
    width: usize,
    threshold: f64,
    rows: *mut f64,
    cols: *mut f64,
    confidence: *mut f64,
    visible: *mut u8,
    len: usize,
) -> HcaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if pixels.is_null() || rows.is_null() || cols.is_null() || confidence.is_null() || visible.is_null() {
            return Err(null("buffer"));
        }
        let v = m.model.config().num_discs;
        if len != v {
            return Err((
                HcaStatus::InvalidArgument,
                format!("output length {len} does not match {v} discs"),
            ));
        }
        let n = height
            .checked_mul(width)
            .filter(|&n| n > 0)
            .ok_or((HcaStatus::InvalidArgument, format!("bad image size {height}x{width}")))?;
        let data = std::slice::from_raw_parts(pixels, n).to_vec();
        if data.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err((
                HcaStatus::InvalidArgument,
                "pixel values must lie in [0, 1]".to_string(),
            ));
        }
        let image = Tensor::from_vec(&[height, width], data).map_err(fail)?;
        let preds = predict_image(&m.model, &image, threshold).map_err(fail)?;
        for (i, p) in preds.iter().enumerate() {
            *rows.add(i) = p.row;
            *cols.add(i) = p.col;
            *confidence.add(i) = p.confidence;
            *visible.add(i) = p.visible;
        }
        Ok(())
    })
}

/// Message for the last failed call on this thread; empty after success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn hca_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hca_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
