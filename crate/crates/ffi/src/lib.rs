//! C ABI over `tgrow`. Models are opaque `TgModel` handles owned by the
//! caller and released with `tg_model_free`. Every fallible call returns a
//! `TgStatus`; on failure `tg_last_error` describes what went wrong.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use tgrow::checkpoint;
use tgrow::plan::Plan;
use tgrow::transforms::apply_schedule;
use tgrow::verify::{compare_models, sample_inputs};
use tgrow::{Error, Model, ModelConfig};

/// Opaque model handle.
pub struct TgModel {
    inner: Model,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TgStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Malformed JSON, bad shapes or out-of-range values.
    InvalidArgument = 3,
    Io = 4,
    /// Not a readable checkpoint.
    BadCheckpoint = 5,
    /// A plan step could not be applied.
    Schedule = 6,
    /// The plan fills constrained blocks and `allow_unsafe` was false.
    UnsafePlan = 7,
    /// The output buffer is too small; the required length was written back.
    BufferTooSmall = 8,
    Panic = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: TgStatus, message: impl ToString) -> TgStatus {
    set_error(message.to_string());
    status
}

fn status_of(e: &Error) -> TgStatus {
    match e {
        Error::Io { .. } => TgStatus::Io,
        Error::Checkpoint(_) => TgStatus::BadCheckpoint,
        Error::Schedule { .. } => TgStatus::Schedule,
        _ => TgStatus::InvalidArgument,
    }
}

fn from_error(e: Error) -> TgStatus {
    fail(status_of(&e), e)
}

/// Runs `f`, turning panics into `TgStatus::Panic`.
fn guard(f: impl FnOnce() -> TgStatus) -> TgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(TgStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, TgStatus> {
    if p.is_null() {
        return Err(fail(TgStatus::NullArgument, "null string argument"));
    }
    CStr::from_ptr(p).to_str().map_err(|e| fail(TgStatus::InvalidUtf8, e))
}

unsafe fn model_arg<'a>(p: *const TgModel) -> Result<&'a Model, TgStatus> {
    p.as_ref()
        .map(|m| &m.inner)
        .ok_or_else(|| fail(TgStatus::NullArgument, "null model handle"))
}

unsafe fn put_model(out: *mut *mut TgModel, model: Model) -> TgStatus {
    *out = Box::into_raw(Box::new(TgModel { inner: model }));
    TgStatus::Ok
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Initializes a model from a JSON config.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tg_model_init(
    config_json: *const c_char,
    seed: u64,
    stddev: f64,
    out: *mut *mut TgModel,
) -> TgStatus {
    guard(|| {
        if out.is_null() {
            return fail(TgStatus::NullArgument, "null out pointer");
        }
        let text = tri!(str_arg(config_json));
        let config = tri!(ModelConfig::from_json(text).map_err(from_error));
        match Model::init(config, seed, stddev) {
            Ok(m) => put_model(out, m),
            Err(e) => from_error(e),
        }
    })
}

/// Reads a `.tgrw` checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tg_model_load(path: *const c_char, out: *mut *mut TgModel) -> TgStatus {
    guard(|| {
        if out.is_null() {
            return fail(TgStatus::NullArgument, "null out pointer");
        }
        let path = tri!(str_arg(path));
        match checkpoint::load(path) {
            Ok(m) => put_model(out, m),
            Err(e) => from_error(e),
        }
    })
}

/// Writes a `.tgrw` checkpoint atomically.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tg_model_save(model: *const TgModel, path: *const c_char) -> TgStatus {
    guard(|| {
        let model = tri!(model_arg(model));
        let path = tri!(str_arg(path));
        match checkpoint::save_model(model, path) {
            Ok(()) => TgStatus::Ok,
            Err(e) => from_error(e),
        }
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tg_model_free(model: *mut TgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Total number of scalar parameters.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tg_model_param_count(model: *const TgModel, out: *mut u64) -> TgStatus {
    guard(|| {
        let model = tri!(model_arg(model));
        if out.is_null() {
            return fail(TgStatus::NullArgument, "null out pointer");
        }
        *out = model.params.scalar_count() as u64;
        TgStatus::Ok
    })
}

/// The model config as JSON. Free the string with `tg_string_free`.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tg_model_config_json(model: *const TgModel, out: *mut *mut c_char) -> TgStatus {
    guard(|| {
        let model = tri!(model_arg(model));
        if out.is_null() {
            return fail(TgStatus::NullArgument, "null out pointer");
        }
        let text = model.config.to_json();
        *out = CString::new(text).expect("json has no NUL").into_raw();
        TgStatus::Ok
    })
}

/// # Safety
/// `s` must be null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Runs the model on `len` tokens and writes the `len x out_dim` logits
/// row-major into `out`. `*out_len` holds the buffer capacity on entry and
/// the number of values needed on return.
///
/// # Safety
/// `tokens` must point to `len` values, `out` to `*out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn tg_model_forward(
    model: *const TgModel,
    tokens: *const u32,
    len: usize,
    out: *mut f64,
    out_len: *mut usize,
) -> TgStatus {
    guard(|| {
        let model = tri!(model_arg(model));
        if out_len.is_null() || (len > 0 && tokens.is_null()) {
            return fail(TgStatus::NullArgument, "null tokens or out_len");
        }
        let tokens: Vec<usize> = if len == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(tokens, len)
                .iter()
                .map(|&t| t as usize)
                .collect()
        };
        let logits = match model.forward(&tokens) {
            Ok(l) => l,
            Err(e) => return from_error(e),
        };
        let needed = logits.len();
        let capacity = *out_len;
        *out_len = needed;
        if capacity < needed || out.is_null() {
            return fail(
                TgStatus::BufferTooSmall,
                format!("need {needed} values, got {capacity}"),
            );
        }
        ptr::copy_nonoverlapping(logits.data().as_ptr(), out, needed);
        TgStatus::Ok
    })
}

/// Applies a JSON plan and returns the expanded model as a new handle; the
/// input handle is left untouched.
///
/// # Safety
/// `model` must be a live handle, `plan_json` a NUL-terminated string and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tg_model_apply_plan(
    model: *const TgModel,
    plan_json: *const c_char,
    allow_unsafe: bool,
    out: *mut *mut TgModel,
) -> TgStatus {
    guard(|| {
        let model = tri!(model_arg(model));
        let text = tri!(str_arg(plan_json));
        if out.is_null() {
            return fail(TgStatus::NullArgument, "null out pointer");
        }
        let plan = match Plan::parse(text) {
            Ok(p) => p,
            Err(e) => return from_error(e),
        };
        if plan.has_unsafe() && !allow_unsafe {
            return fail(TgStatus::UnsafePlan, "plan uses unsafe_fill");
        }
        let specs = match plan.to_specs() {
            Ok(s) => s,
            Err(e) => return from_error(e),
        };
        match apply_schedule(&model.config, &model.params, &specs) {
            Ok((config, params, _)) => put_model(out, Model { config, params }),
            Err(e) => from_error(e),
        }
    })
}

/// Compares two models on `inputs` sampled sequences. Writes the largest
/// absolute logit difference and whether it is within `tol`.
///
/// # Safety
/// `a` and `b` must be live handles; `max_abs` and `pass` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn tg_model_verify(
    a: *const TgModel,
    b: *const TgModel,
    inputs: usize,
    seed: u64,
    tol: f64,
    max_abs: *mut f64,
    pass: *mut bool,
) -> TgStatus {
    guard(|| {
        let a = tri!(model_arg(a));
        let b = tri!(model_arg(b));
        if max_abs.is_null() || pass.is_null() {
            return fail(TgStatus::NullArgument, "null out pointer");
        }
        if inputs == 0 {
            return fail(TgStatus::InvalidArgument, "inputs must be >= 1");
        }
        let samples = sample_inputs(&a.config, inputs, seed);
        match compare_models(a, b, &samples, tol) {
            Ok(report) => {
                *max_abs = report.max_abs_diff;
                *pass = report.pass;
                TgStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}
