//! C ABI for `flicker-ews`.
//!
//! Conventions:
//!
//! * Every fallible function returns a [`FewsStatus`]; results go through
//!   out-pointers that are written only on success.
//! * After a failure, [`fews_last_error_message`] returns a description
//!   owned by the library and valid until the next call on the same thread.
//! * Handles ([`FewsModel`], [`FewsEnsemble`], [`FewsTrace`]) are opaque and
//!   released with their `*_free` function. Passing NULL to a `*_free`
//!   function is a no-op.
//! * Panics never cross the boundary; they are reported as
//!   `FEWS_STATUS_INTERNAL_ERROR`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use flicker_ews::detector::{self, EnsembleSpec, Member, ProbabilityTrace};
use flicker_ews::dynamics::DriftFamily;
use flicker_ews::evaluation::{ExperimentSpec, Regime};
use flicker_ews::features;
use flicker_ews::neuralnet::Checkpoint;
use flicker_ews::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FewsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DataError = 3,
    NumericalError = 4,
    BufferTooSmall = 5,
    InternalError = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FewsRegime {
    Flickering = 0,
    Null = 1,
}

/// A loaded classifier checkpoint.
pub struct FewsModel {
    checkpoint: Checkpoint,
}

/// Checkpoints paired with window fractions.
pub struct FewsEnsemble {
    members: Vec<Member>,
    stride_fraction: f64,
    var_window_base: usize,
}

/// Result of an ensemble scan.
pub struct FewsTrace {
    trace: ProbabilityTrace,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let clean = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = clean);
}

fn status_of(err: &Error) -> FewsStatus {
    match err.exit_code() {
        2 => FewsStatus::InvalidArgument,
        4 => FewsStatus::NumericalError,
        _ => FewsStatus::DataError,
    }
}

struct Failure(FewsStatus, String);

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        Failure(status_of(&err), err.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(FewsStatus::NullPointer, format!("{what} is NULL"))
}

fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> FewsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            FewsStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_last_error(&message);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            FewsStatus::InternalError
        }
    }
}

/// # Safety
/// `ptr` must be NULL or point to `len` readable values.
unsafe fn slice<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `ptr` must be NULL or point to `len` writable values.
unsafe fn slice_mut<'a>(ptr: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

/// # Safety
/// `out` must be NULL or valid for a write of `T`.
unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(value);
    Ok(())
}

/// # Safety
/// `s` must be NULL or a NUL-terminated string.
unsafe fn string<'a>(s: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| Failure(FewsStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fews_version() -> *const c_char {
    static VERSION: &CStr =
        match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
            Ok(v) => v,
            Err(_) => panic!("version contains NUL"),
        };
    VERSION.as_ptr()
}

/// Message of the last failed call on this thread (empty after a success).
#[no_mangle]
pub extern "C" fn fews_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn fews_model_load(
    path: *const c_char,
    out: *mut *mut FewsModel,
) -> FewsStatus {
    guard(|| {
        let path = string(path, "path")?;
        let checkpoint = Checkpoint::load(Path::new(path))?;
        write_out(out, Box::into_raw(Box::new(FewsModel { checkpoint })))
    })
}

/// # Safety
/// `model` must be NULL or a handle from [`fews_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fews_model_free(model: *mut FewsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn fews_model_native_length(
    model: *const FewsModel,
    out: *mut usize,
) -> FewsStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        write_out(out, model.checkpoint.native_length())
    })
}

/// Flicker probability of a raw series of exactly the model's native
/// length, assembled with the checkpoint's variance window.
///
/// # Safety
/// `series` must point to `len` values, `model` be live, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fews_model_predict(
    model: *const FewsModel,
    series: *const f64,
    len: usize,
    out_p_flicker: *mut f64,
) -> FewsStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let x = slice(series, len, "series")?;
        let ckpt = &model.checkpoint;
        if len != ckpt.native_length() {
            return Err(Failure(
                FewsStatus::InvalidArgument,
                format!(
                    "series has {len} samples, model expects {}",
                    ckpt.native_length()
                ),
            ));
        }
        let input = features::assemble_channels(x, ckpt.var_window)?.interleaved_f32();
        let probs = ckpt.network.predict(&input)?;
        write_out(out_p_flicker, probs[1])
    })
}

/// Creates an empty ensemble with the default stride and variance base.
///
/// # Safety
/// `out` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn fews_ensemble_new(out: *mut *mut FewsEnsemble) -> FewsStatus {
    guard(|| {
        let ensemble = FewsEnsemble {
            members: Vec::new(),
            stride_fraction: detector::DEFAULT_STRIDE_FRACTION,
            var_window_base: detector::DEFAULT_VAR_WINDOW_BASE,
        };
        write_out(out, Box::into_raw(Box::new(ensemble)))
    })
}

/// # Safety
/// `ensemble` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fews_ensemble_free(ensemble: *mut FewsEnsemble) {
    if !ensemble.is_null() {
        drop(Box::from_raw(ensemble));
    }
}

/// Adds a copy of `model` with window fraction `window_fraction` in (0, 1).
/// The model handle may be freed afterwards.
///
/// # Safety
/// Both handles must be live.
#[no_mangle]
pub unsafe extern "C" fn fews_ensemble_add(
    ensemble: *mut FewsEnsemble,
    model: *const FewsModel,
    window_fraction: f64,
) -> FewsStatus {
    guard(|| {
        let ensemble = ensemble.as_mut().ok_or_else(|| null("ensemble"))?;
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if !(window_fraction > 0.0 && window_fraction < 1.0) {
            return Err(Failure(
                FewsStatus::InvalidArgument,
                format!("window fraction {window_fraction} outside (0, 1)"),
            ));
        }
        ensemble.members.push(Member {
            checkpoint: model.checkpoint.clone(),
            window_fraction,
        });
        Ok(())
    })
}

/// Sets the window stride as a fraction of the window, in (0, 1].
///
/// # Safety
/// `ensemble` must be live.
#[no_mangle]
pub unsafe extern "C" fn fews_ensemble_set_stride(
    ensemble: *mut FewsEnsemble,
    stride_fraction: f64,
) -> FewsStatus {
    guard(|| {
        let ensemble = ensemble.as_mut().ok_or_else(|| null("ensemble"))?;
        if !(stride_fraction > 0.0 && stride_fraction <= 1.0) {
            return Err(Failure(
                FewsStatus::InvalidArgument,
                format!("stride fraction {stride_fraction} outside (0, 1]"),
            ));
        }
        ensemble.stride_fraction = stride_fraction;
        Ok(())
    })
}

/// Slides every member over `series` and returns the ensemble trace.
///
/// # Safety
/// `series` must point to `len` values, `ensemble` be live, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fews_ensemble_scan(
    ensemble: *const FewsEnsemble,
    series: *const f64,
    len: usize,
    out: *mut *mut FewsTrace,
) -> FewsStatus {
    guard(|| {
        let ensemble = ensemble.as_ref().ok_or_else(|| null("ensemble"))?;
        let x = slice(series, len, "series")?;
        let spec = EnsembleSpec {
            members: ensemble.members.clone(),
            stride_fraction: ensemble.stride_fraction,
            var_window_base: ensemble.var_window_base,
        };
        let trace = detector::scan_series(x, &spec)?;
        write_out(out, Box::into_raw(Box::new(FewsTrace { trace })))
    })
}

/// # Safety
/// `trace` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fews_trace_free(trace: *mut FewsTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}

/// Number of trace points; 0 for a NULL handle.
///
/// # Safety
/// `trace` must be NULL or live.
#[no_mangle]
pub unsafe extern "C" fn fews_trace_len(trace: *const FewsTrace) -> usize {
    trace.as_ref().map_or(0, |t| t.trace.len())
}

/// Copies window-end indices and ensemble flicker probabilities into
/// caller buffers of `capacity` elements each. Either buffer may be NULL.
///
/// # Safety
/// Non-NULL buffers must hold `capacity` elements.
#[no_mangle]
pub unsafe extern "C" fn fews_trace_copy(
    trace: *const FewsTrace,
    out_indices: *mut usize,
    out_p_flicker: *mut f64,
    capacity: usize,
) -> FewsStatus {
    guard(|| {
        let t = &trace.as_ref().ok_or_else(|| null("trace"))?.trace;
        if capacity < t.len() {
            return Err(Failure(
                FewsStatus::BufferTooSmall,
                format!("trace has {} points, buffer holds {capacity}", t.len()),
            ));
        }
        if !out_indices.is_null() {
            std::slice::from_raw_parts_mut(out_indices, t.len()).copy_from_slice(&t.times);
        }
        if !out_p_flicker.is_null() {
            std::slice::from_raw_parts_mut(out_p_flicker, t.len()).copy_from_slice(&t.p_flicker);
        }
        Ok(())
    })
}

/// Minimum over members of `max - mean` of the member trace.
///
/// # Safety
/// `trace` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fews_trace_conservative_score(
    trace: *const FewsTrace,
    out: *mut f64,
) -> FewsStatus {
    guard(|| {
        let t = trace.as_ref().ok_or_else(|| null("trace"))?;
        write_out(out, detector::trace_conservative_score(&t.trace)?)
    })
}

/// Back-filled trailing population variance; `out` holds `len` values.
///
/// # Safety
/// `x` and `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn fews_rolling_variance(
    x: *const f64,
    len: usize,
    window: usize,
    out: *mut f64,
) -> FewsStatus {
    guard(|| {
        let x = slice(x, len, "x")?;
        let v = features::rolling_variance(x, window)?;
        slice_mut(out, len, "out")?.copy_from_slice(&v);
        Ok(())
    })
}

/// `max V / (mean V + std V)` of the trailing variance `V`.
///
/// # Safety
/// `x` must hold `len` values and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn fews_variance_score(
    x: *const f64,
    len: usize,
    window: usize,
    out: *mut f64,
) -> FewsStatus {
    guard(|| {
        let x = slice(x, len, "x")?;
        write_out(out, detector::variance_score(x, window)?)
    })
}

/// `max(p) - mean(p)`.
///
/// # Safety
/// `p` must hold `len` values and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn fews_dl_score(p: *const f64, len: usize, out: *mut f64) -> FewsStatus {
    guard(|| {
        let p = slice(p, len, "p")?;
        write_out(out, detector::dl_score(p)?)
    })
}

/// Area under the ROC curve of "alarm when score >= threshold".
///
/// # Safety
/// `pos` and `neg` must hold `n_pos` and `n_neg` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fews_roc_auc(
    pos: *const f64,
    n_pos: usize,
    neg: *const f64,
    n_neg: usize,
    out: *mut f64,
) -> FewsStatus {
    guard(|| {
        let pos = slice(pos, n_pos, "pos")?;
        let neg = slice(neg, n_neg, "neg")?;
        write_out(out, flicker_ews::evaluation::roc_from_scores(pos, neg)?.auc)
    })
}

/// Replicate `replicate` of a named test system (`cubic`, `exponential`,
/// `tanh`, `hill`, `logistic`, `arctan`) with its default noise level and
/// control range, `len` samples at dt = 0.01, written to `out`.
///
/// # Safety
/// `system` must be a NUL-terminated string and `out` hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn fews_simulate_named(
    system: *const c_char,
    regime: FewsRegime,
    len: usize,
    base_seed: u64,
    replicate: usize,
    out: *mut f64,
) -> FewsStatus {
    guard(|| {
        let family: DriftFamily = string(system, "system")?.parse()?;
        let regime = match regime {
            FewsRegime::Flickering => Regime::Flickering,
            FewsRegime::Null => Regime::Null,
        };
        let spec = ExperimentSpec::new(family, regime, replicate + 1, base_seed)?.with_steps(len);
        spec.validate()?;
        let t = spec.replicate(replicate)?;
        slice_mut(out, len, "out")?.copy_from_slice(&t.values);
        Ok(())
    })
}
