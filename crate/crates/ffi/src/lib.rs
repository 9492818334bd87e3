//! C ABI for `bigs-core`.
//!
//! Every fallible entry point returns a [`BigsStatus`]; on failure the message
//! is available from [`bigs_last_error`] on the same thread until the next call.
//! Objects are opaque handles released with their `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use num_complex::Complex64;

use bigs_core::model::{load_checkpoint, param_count, save_checkpoint, Arch, Checkpoint, Model, ModelConfig, Routing};
use bigs_core::numerics::Rng;
use bigs_core::ssm::{convolve, discretize, init_s4d, materialize_kernel, scan, SsmParams};
use bigs_core::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BigsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numeric = 5,
    Unsupported = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Block layout selector for [`bigs_model_new_toy`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BigsArch {
    Gated = 0,
    Stacked = 1,
}

/// Token routing selector for [`bigs_model_new_toy`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BigsRouting {
    Ssm = 0,
    Attention = 1,
}

/// Opaque diagonal SSM.
pub struct BigsSsm {
    params: SsmParams,
}

/// Opaque model.
pub struct BigsModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> BigsStatus {
    match e {
        Error::Io { .. } => BigsStatus::Io,
        Error::Format { .. } | Error::Json(_) => BigsStatus::Format,
        Error::NonFiniteGradient(_) | Error::Diverged { .. } => BigsStatus::Numeric,
        Error::Unsupported(_) => BigsStatus::Unsupported,
        _ => BigsStatus::InvalidArgument,
    }
}

struct Fail(BigsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(BigsStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> BigsStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BigsStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            BigsStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn path<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| Fail(BigsStatus::InvalidArgument, "path is not valid UTF-8".into()))
}

fn copy_out(src: &[f64], dst: &mut [f64]) -> Result<(), Fail> {
    if dst.len() < src.len() {
        return Err(Fail(
            BigsStatus::BufferTooSmall,
            format!("output buffer holds {} values, {} needed", dst.len(), src.len()),
        ));
    }
    dst[..src.len()].copy_from_slice(src);
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn bigs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bigs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// S4D-initialized SSM with `n_state` states (even) and a step drawn log-uniformly in `[dt_min, dt_max]`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn bigs_ssm_new_s4d(
    n_state: usize,
    dt_min: f64,
    dt_max: f64,
    seed: u64,
    out: *mut *mut BigsSsm,
) -> BigsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let params = init_s4d(n_state, dt_min, dt_max, &mut Rng::new(seed))?;
        *out = Box::into_raw(Box::new(BigsSsm { params }));
        Ok(())
    })
}

/// SSM from explicit diagonal parameters, each array of length `modes`.
/// `conjugate_pairs != 0` makes each state stand for a conjugate pair.
///
/// # Safety
/// All arrays must hold `modes` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bigs_ssm_new_diagonal(
    modes: usize,
    lambda_re: *const f64,
    lambda_im: *const f64,
    b_re: *const f64,
    b_im: *const f64,
    c_re: *const f64,
    c_im: *const f64,
    d: f64,
    dt: f64,
    conjugate_pairs: i32,
    out: *mut *mut BigsSsm,
) -> BigsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let pair = |re: *const f64, im: *const f64, what: &str| -> Result<Vec<_>, Fail> {
            let re = slice(re, modes, what)?;
            let im = slice(im, modes, what)?;
            Ok(re.iter().zip(im).map(|(&r, &i)| Complex64::new(r, i)).collect())
        };
        let lambda = pair(lambda_re, lambda_im, "lambda")?;
        let b = pair(b_re, b_im, "b")?;
        let c = pair(c_re, c_im, "c")?;
        let params = SsmParams::from_diagonal(&lambda, &b, &c, d, dt, conjugate_pairs != 0)?;
        *out = Box::into_raw(Box::new(BigsSsm { params }));
        Ok(())
    })
}

/// Release an SSM handle. Null is ignored.
///
/// # Safety
/// `ssm` must come from a `bigs_ssm_new_*` call and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bigs_ssm_free(ssm: *mut BigsSsm) {
    if !ssm.is_null() {
        drop(Box::from_raw(ssm));
    }
}

/// Write the first `len` kernel taps into `out`.
///
/// # Safety
/// `ssm` must be a live handle; `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn bigs_ssm_kernel(ssm: *const BigsSsm, len: usize, out: *mut f64) -> BigsStatus {
    guard(|| {
        let ssm = ssm.as_ref().ok_or_else(|| null("ssm"))?;
        let k = materialize_kernel(&discretize(&ssm.params), len);
        copy_out(&k.taps, slice_mut(out, len, "out")?)
    })
}

/// Apply the SSM to a length-`len` signal, via FFT convolution (`use_scan == 0`) or recurrence.
///
/// # Safety
/// `ssm` must be a live handle; `input` and `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn bigs_ssm_apply(
    ssm: *const BigsSsm,
    input: *const f64,
    len: usize,
    use_scan: i32,
    out: *mut f64,
) -> BigsStatus {
    guard(|| {
        let ssm = ssm.as_ref().ok_or_else(|| null("ssm"))?;
        let u = slice(input, len, "input")?;
        let disc = discretize(&ssm.params);
        let y = if use_scan != 0 {
            scan(&disc, u)
        } else {
            convolve(&materialize_kernel(&disc, len), ssm.params.d, u)?
        };
        copy_out(&y, slice_mut(out, len, "out")?)
    })
}

/// Freshly initialized desk-scale model (d = 64, two layers, length 32).
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bigs_model_new_toy(
    arch: BigsArch,
    routing: BigsRouting,
    vocab_size: usize,
    seed: u64,
    out: *mut *mut BigsModel,
) -> BigsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let arch = match arch {
            BigsArch::Gated => Arch::Gated,
            BigsArch::Stacked => Arch::Stacked,
        };
        let routing = match routing {
            BigsRouting::Ssm => Routing::Ssm,
            BigsRouting::Attention => Routing::Attention,
        };
        let mut cfg = ModelConfig::toy(arch, routing);
        cfg.vocab_size = vocab_size;
        let model = Model::new(cfg, seed)?;
        *out = Box::into_raw(Box::new(BigsModel { model }));
        Ok(())
    })
}

/// Load a checkpoint directory.
///
/// # Safety
/// `dir` must be a NUL-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bigs_model_load(dir: *const c_char, out: *mut *mut BigsModel) -> BigsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = load_checkpoint(path(dir)?)?.model()?;
        *out = Box::into_raw(Box::new(BigsModel { model }));
        Ok(())
    })
}

/// Write the model as a step-0 checkpoint directory.
///
/// # Safety
/// `model` must be a live handle; `dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn bigs_model_save(model: *const BigsModel, dir: *const c_char) -> BigsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        save_checkpoint(path(dir)?, &Checkpoint::from_model(&m.model, 0))?;
        Ok(())
    })
}

/// Release a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from `bigs_model_new_toy` or `bigs_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bigs_model_free(model: *mut BigsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bigs_model_vocab_size(model: *const BigsModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.cfg.vocab_size)
}

/// Maximum sequence length, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bigs_model_max_len(model: *const BigsModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.cfg.max_len)
}

/// Analytic parameter total, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bigs_model_param_count(model: *const BigsModel) -> usize {
    model.as_ref().map_or(0, |m| param_count(&m.model.cfg).total)
}

/// MLM logits for one sequence, row-major `[n_tokens, vocab_size]`.
///
/// # Safety
/// `model` must be a live handle; `tokens` must hold `n_tokens` ids and
/// `logits` `logits_len` values.
#[no_mangle]
pub unsafe extern "C" fn bigs_model_logits(
    model: *const BigsModel,
    tokens: *const u32,
    n_tokens: usize,
    logits: *mut f64,
    logits_len: usize,
) -> BigsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if n_tokens == 0 {
            return Err(Fail(BigsStatus::InvalidArgument, "empty sequence".into()));
        }
        let out = m.model.forward_mlm(slice(tokens, n_tokens, "tokens")?)?;
        copy_out(out.data(), slice_mut(logits, logits_len, "logits")?)
    })
}

/// Re-materialize SSM kernels at a longer maximum length (no new parameters).
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn bigs_model_extend(model: *mut BigsModel, new_len: usize) -> BigsStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        m.model.extend_max_len(new_len)?;
        Ok(())
    })
}
