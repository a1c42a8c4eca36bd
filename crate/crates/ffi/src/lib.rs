//! C interface to the workbench.
//!
//! Every fallible function returns a [`CluStatus`]; on failure the message is
//! available from [`clu_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function. Strings returned through
//! `char **` out-parameters are owned by the caller and released with
//! [`clu_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use clu_core::buffer::ReservoirBuffer;
use clu_core::clu::{adaptive_coeffs_learn, adaptive_coeffs_unlearn, saliency_mask, slow_step, CoefficientSchedule, SaliencyConfig};
use clu_core::data::Sample;
use clu_core::experiment::{report_json, run_seed, ExperimentConfig, RunOptions, RunResult};
use clu_core::model::ParamVector;
use clu_core::task::Payload;
use clu_core::verification::{run_suite, Suite};
use clu_core::CluError;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CluStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Config = 4,
    Numerical = 5,
    Io = 6,
    Panic = 7,
}

/// Reservoir memory buffer.
pub struct CluBuffer(ReservoirBuffer);

/// Parsed experiment configuration.
pub struct CluExperiment(ExperimentConfig);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(CluStatus, String);

impl From<CluError> for Failure {
    fn from(e: CluError) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn status_of(e: &CluError) -> CluStatus {
    match e {
        CluError::Config(_) | CluError::Parse { .. } | CluError::Checkpoint(_) => CluStatus::Config,
        CluError::Singular { .. } => CluStatus::Numerical,
        CluError::Io(_) => CluStatus::Io,
        CluError::Task { source, .. } => status_of(source),
        _ => CluStatus::InvalidArgument,
    }
}

impl Failure {

    fn null(what: &str) -> Self {
        Failure(CluStatus::NullPointer, format!("{what} is null"))
    }

    fn arg(msg: impl Into<String>) -> Self {
        Failure(CluStatus::InvalidArgument, msg.into())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CluStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CluStatus::Ok
        }
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            CluStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn output<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::null(what));
    }
    Ok(slice::from_raw_parts_mut(p, n))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(CluStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn hand_out(s: String, out: *mut *mut c_char) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::null("out"));
    }
    let c = CString::new(s).map_err(|_| Failure::arg("result contains a nul byte"))?;
    *out = c.into_raw();
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library from this thread.
#[no_mangle]
pub extern "C" fn clu_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn clu_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string produced by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn clu_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Learning coefficients for `n` detached losses at outer step `k` of `total`.
///
/// # Safety
/// `losses` and `out` must point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn clu_coeffs_learn(
    losses: *const f64,
    n: usize,
    k: usize,
    total: usize,
    lambda: f64,
    out: *mut f64,
) -> CluStatus {
    guard(|| {
        let l = input(losses, n, "losses")?;
        let sched = CoefficientSchedule {
            lambda_learn: lambda,
            ..CoefficientSchedule::default()
        };
        sched.validate()?;
        output(out, n, "out")?.copy_from_slice(&adaptive_coeffs_learn(l, k, total, &sched)?);
        Ok(())
    })
}

/// Unlearning coefficients; see [`clu_coeffs_learn`].
///
/// # Safety
/// `losses` and `out` must point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn clu_coeffs_unlearn(
    losses: *const f64,
    n: usize,
    k: usize,
    total: usize,
    lambda: f64,
    out: *mut f64,
) -> CluStatus {
    guard(|| {
        let l = input(losses, n, "losses")?;
        let sched = CoefficientSchedule {
            lambda_unlearn: lambda,
            ..CoefficientSchedule::default()
        };
        sched.validate()?;
        output(out, n, "out")?.copy_from_slice(&adaptive_coeffs_unlearn(l, k, total, &sched)?);
        Ok(())
    })
}

/// Writes 1 where `task_abs[i] / remain_abs[i] >= gamma`, else 0.
///
/// # Safety
/// `task_abs` and `remain_abs` must point to `n` doubles, `out` to `n` bytes.
#[no_mangle]
pub unsafe extern "C" fn clu_saliency_mask(
    task_abs: *const f64,
    remain_abs: *const f64,
    n: usize,
    gamma: f64,
    out: *mut u8,
) -> CluStatus {
    guard(|| {
        let cfg = SaliencyConfig::new(gamma);
        cfg.validate()?;
        let m = saliency_mask(input(task_abs, n, "task_abs")?, input(remain_abs, n, "remain_abs")?, &cfg)?;
        for (o, &b) in output(out, n, "out")?.iter_mut().zip(m.bits()) {
            *o = u8::from(b);
        }
        Ok(())
    })
}

/// `out = (1 - alpha) * theta + alpha * theta_r`.
///
/// # Safety
/// All three pointers must reference `n` doubles; `out` may alias either input.
#[no_mangle]
pub unsafe extern "C" fn clu_slow_step(
    theta: *const f64,
    theta_r: *const f64,
    n: usize,
    alpha: f64,
    out: *mut f64,
) -> CluStatus {
    guard(|| {
        let a = ParamVector::new(input(theta, n, "theta")?.to_vec())?;
        let b = ParamVector::new(input(theta_r, n, "theta_r")?.to_vec())?;
        let next = slow_step(&a, &b, alpha)?;
        output(out, n, "out")?.copy_from_slice(next.as_slice());
        Ok(())
    })
}

/// New empty buffer.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn clu_buffer_new(capacity: usize, seed: u64, out: *mut *mut CluBuffer) -> CluStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        let b = ReservoirBuffer::new(capacity, seed)?;
        *out = Box::into_raw(Box::new(CluBuffer(b)));
        Ok(())
    })
}

/// Offers one sample to the reservoir.
///
/// # Safety
/// `buffer` must be live; `features` must point to `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn clu_buffer_observe(
    buffer: *mut CluBuffer,
    id: u64,
    label: usize,
    features: *const f64,
    dim: usize,
) -> CluStatus {
    guard(|| {
        let b = buffer.as_mut().ok_or_else(|| Failure::null("buffer"))?;
        let features = input(features, dim, "features")?.to_vec();
        b.0.observe(Sample { id, features, label })?;
        Ok(())
    })
}

/// Number of stored samples; 0 for a null handle.
///
/// # Safety
/// `buffer` must be live or null.
#[no_mangle]
pub unsafe extern "C" fn clu_buffer_len(buffer: *const CluBuffer) -> usize {
    buffer.as_ref().map_or(0, |b| b.0.len())
}

/// Whether a sample id is currently stored.
///
/// # Safety
/// `buffer` must be live or null.
#[no_mangle]
pub unsafe extern "C" fn clu_buffer_contains(buffer: *const CluBuffer, id: u64) -> bool {
    buffer.as_ref().is_some_and(|b| b.0.contains(id))
}

/// Removes every stored sample of the given classes and refuses them later.
/// `removed` (optional) receives the count.
///
/// # Safety
/// `buffer` must be live; `classes` must point to `n` entries.
#[no_mangle]
pub unsafe extern "C" fn clu_buffer_erase_classes(
    buffer: *mut CluBuffer,
    classes: *const usize,
    n: usize,
    removed: *mut usize,
) -> CluStatus {
    guard(|| {
        let b = buffer.as_mut().ok_or_else(|| Failure::null("buffer"))?;
        let k = b.0.erase(&Payload::Classes(input(classes, n, "classes")?.to_vec()));
        if let Some(r) = removed.as_mut() {
            *r = k;
        }
        Ok(())
    })
}

/// Removes the given sample ids and refuses them later.
///
/// # Safety
/// `buffer` must be live; `ids` must point to `n` entries.
#[no_mangle]
pub unsafe extern "C" fn clu_buffer_erase_samples(
    buffer: *mut CluBuffer,
    ids: *const u64,
    n: usize,
    removed: *mut usize,
) -> CluStatus {
    guard(|| {
        let b = buffer.as_mut().ok_or_else(|| Failure::null("buffer"))?;
        let k = b.0.erase(&Payload::Samples(input(ids, n, "ids")?.to_vec()));
        if let Some(r) = removed.as_mut() {
            *r = k;
        }
        Ok(())
    })
}

/// # Safety
/// `buffer` must come from [`clu_buffer_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn clu_buffer_free(buffer: *mut CluBuffer) {
    if !buffer.is_null() {
        drop(Box::from_raw(buffer));
    }
}

/// Parses and validates a TOML experiment configuration.
///
/// # Safety
/// `toml` must be a nul-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn clu_experiment_from_toml(toml: *const c_char, out: *mut *mut CluExperiment) -> CluStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        let cfg = ExperimentConfig::from_toml(text(toml, "toml")?)?;
        cfg.validate()?;
        *out = Box::into_raw(Box::new(CluExperiment(cfg)));
        Ok(())
    })
}

/// Runs one seed and returns its metrics as JSON.
///
/// # Safety
/// `exp` must be live; `json` a valid string slot.
#[no_mangle]
pub unsafe extern "C" fn clu_experiment_run_seed(exp: *const CluExperiment, seed: u64, json: *mut *mut c_char) -> CluStatus {
    guard(|| {
        let e = exp.as_ref().ok_or_else(|| Failure::null("experiment"))?;
        let report = match run_seed(&e.0, seed, RunOptions::default())? {
            RunResult::Finished(o) => o.report,
            RunResult::Stopped(_) => return Err(Failure::arg("run stopped before the last task")),
        };
        hand_out(report_json(&report)?, json)
    })
}

/// # Safety
/// `exp` must come from [`clu_experiment_from_toml`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn clu_experiment_free(exp: *mut CluExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

/// Runs the numerical theory checks (`all` adds gradient checks) and returns
/// the report as JSON. `passed` (optional) receives the overall verdict.
///
/// # Safety
/// `json` must be a valid string slot; `passed` valid or null.
#[no_mangle]
pub unsafe extern "C" fn clu_verify(seed: u64, all: bool, passed: *mut bool, json: *mut *mut c_char) -> CluStatus {
    guard(|| {
        let report = run_suite(if all { Suite::All } else { Suite::Props }, seed)?;
        if let Some(p) = passed.as_mut() {
            *p = report.passed;
        }
        let s = serde_json::to_string_pretty(&report).map_err(|e| Failure::arg(e.to_string()))?;
        hand_out(s, json)
    })
}
