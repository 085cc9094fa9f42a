//! C interface to trained STET models.
//!
//! A model is loaded from a checkpoint into an opaque [`StetModel`] handle and
//! queried one window at a time. Every fallible call returns a [`StetStatus`];
//! on failure [`stet_last_error`] describes what went wrong on the calling
//! thread. Handles are immutable after loading and may be shared between
//! threads.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use stet_core::model::{HeadKind, Model};
use stet_core::{StetError, Tensor};

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Config = 4,
    Dimension = 5,
    Numeric = 6,
    WrongHead = 7,
    Panic = 8,
    Other = 9,
}

/// Opaque handle to a loaded model.
pub struct StetModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &StetError) -> StetStatus {
    match err {
        StetError::Io { .. } | StetError::Parse { .. } => StetStatus::Io,
        StetError::Config(_) | StetError::ConfigMismatch(_) | StetError::Parameter(_) => StetStatus::Config,
        StetError::Dimension { .. } | StetError::Rank { .. } => StetStatus::Dimension,
        StetError::NumericInstability { .. } | StetError::DegenerateSlice { .. } => StetStatus::Numeric,
        _ => StetStatus::Other,
    }
}

fn fail(status: StetStatus, msg: impl Into<String>) -> StetStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), StetStatus>) -> StetStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => StetStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(StetStatus::Panic, msg)
        }
    }
}

fn core_err(e: StetError) -> StetStatus {
    let s = status_of(&e);
    fail(s, e.to_string())
}

/// # Safety
/// `model` must be null or a live handle from [`stet_model_load`].
unsafe fn handle<'a>(model: *const StetModel) -> Result<&'a StetModel, StetStatus> {
    model
        .as_ref()
        .ok_or_else(|| fail(StetStatus::NullPointer, "model handle is null"))
}

/// # Safety
/// `data` must point to `len` readable doubles.
unsafe fn window(m: &Model, data: *const f64, len: usize) -> Result<Tensor, StetStatus> {
    if data.is_null() {
        return Err(fail(StetStatus::NullPointer, "window buffer is null"));
    }
    let (t, c) = (m.config().t, m.config().c);
    if len != t * c {
        return Err(fail(
            StetStatus::Dimension,
            format!("window has {len} values, model expects {t}x{c} = {}", t * c),
        ));
    }
    let vals = std::slice::from_raw_parts(data, len).to_vec();
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(fail(StetStatus::InvalidArgument, "window contains a non-finite value"));
    }
    Tensor::new(vec![t, c], vals).map_err(core_err)
}

/// Loads a checkpoint. On success `*out` receives a handle that must be
/// released with [`stet_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn stet_model_load(path: *const libc::c_char, out: *mut *mut StetModel) -> StetStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(fail(StetStatus::NullPointer, "path or out pointer is null"));
        }
        *out = ptr::null_mut();
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(StetStatus::InvalidArgument, "path is not valid UTF-8"))?;
        let model = Model::load(Path::new(p)).map_err(core_err)?;
        *out = Box::into_raw(Box::new(StetModel { model }));
        Ok(())
    })
}

/// Releases a handle. Null is accepted and ignored.
///
/// # Safety
/// `model` must be null or a handle from [`stet_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn stet_model_free(model: *mut StetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Window length `t` and channel count `c` expected by the model.
///
/// # Safety
/// `model` must be a live handle; `t` and `c` writable pointers.
#[no_mangle]
pub unsafe extern "C" fn stet_model_window_shape(model: *const StetModel, t: *mut usize, c: *mut usize) -> StetStatus {
    guard(|| {
        let m = handle(model)?;
        if t.is_null() || c.is_null() {
            return Err(fail(StetStatus::NullPointer, "output pointer is null"));
        }
        *t = m.model.config().t;
        *c = m.model.config().c;
        Ok(())
    })
}

/// Number of values [`stet_model_predict`] writes: classes for a
/// classification model, joints for a regression model.
///
/// # Safety
/// `model` must be a live handle; `n` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn stet_model_n_outputs(model: *const StetModel, n: *mut usize) -> StetStatus {
    guard(|| {
        let m = handle(model)?;
        if n.is_null() {
            return Err(fail(StetStatus::NullPointer, "output pointer is null"));
        }
        *n = m.model.config().head.n_outputs();
        Ok(())
    })
}

/// Nonzero when the model has a classification head.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn stet_model_is_classifier(model: *const StetModel) -> libc::c_int {
    match model.as_ref() {
        Some(m) => matches!(m.model.config().head, HeadKind::Classify { .. }) as libc::c_int,
        None => 0,
    }
}

/// Runs one normalized window (`t*c` doubles, row-major, time first). Writes
/// class probabilities or joint angles into `out`, which must hold
/// `out_len >= n_outputs` doubles.
///
/// # Safety
/// `data` must point to `len` doubles and `out` to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn stet_model_predict(
    model: *const StetModel,
    data: *const f64,
    len: usize,
    out: *mut f64,
    out_len: usize,
) -> StetStatus {
    guard(|| {
        let m = &handle(model)?.model;
        let x = window(m, data, len)?;
        if out.is_null() {
            return Err(fail(StetStatus::NullPointer, "output buffer is null"));
        }
        let n = m.config().head.n_outputs();
        if out_len < n {
            return Err(fail(
                StetStatus::InvalidArgument,
                format!("output buffer holds {out_len} values, need {n}"),
            ));
        }
        let y = match m.config().head {
            HeadKind::Classify { .. } => m.predict_proba(&x),
            HeadKind::Regress { .. } => m.predict_regress(&x),
        }
        .map_err(core_err)?;
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(&y);
        Ok(())
    })
}

/// Most probable class for one window.
///
/// # Safety
/// `data` must point to `len` doubles and `class_out` be writable.
#[no_mangle]
pub unsafe extern "C" fn stet_model_predict_class(
    model: *const StetModel,
    data: *const f64,
    len: usize,
    class_out: *mut usize,
) -> StetStatus {
    guard(|| {
        let m = &handle(model)?.model;
        if !matches!(m.config().head, HeadKind::Classify { .. }) {
            return Err(fail(StetStatus::WrongHead, "model has a regression head"));
        }
        let x = window(m, data, len)?;
        if class_out.is_null() {
            return Err(fail(StetStatus::NullPointer, "class pointer is null"));
        }
        *class_out = m.predict_class(&x).map_err(core_err)?;
        Ok(())
    })
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn stet_last_error() -> *const libc::c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn stet_version() -> *const libc::c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
