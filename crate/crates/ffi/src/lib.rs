//! C ABI over the posterior target and the information criteria.
//!
//! Every fallible function returns an `int32_t` status (`MM_OK` on success)
//! and leaves a message for [`mm_last_error`] on failure. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use multimorb::evaluation::{self, ElpdReport, LogLikMatrix};
use multimorb::{Error, PosteriorTarget, RunConfig};

pub const MM_OK: i32 = 0;
pub const MM_ERR_NULL: i32 = 1;
pub const MM_ERR_CONFIG: i32 = 2;
pub const MM_ERR_MODEL: i32 = 3;
pub const MM_ERR_DATA: i32 = 4;
pub const MM_ERR_PANIC: i32 = 5;

/// Opaque posterior target.
pub struct MmTarget {
    inner: PosteriorTarget,
}

/// Summary of an information criterion.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MmElpd {
    pub elpd: f64,
    pub p_eff: f64,
    pub se: f64,
    pub ic: f64,
    pub ic_se: f64,
}

impl From<&ElpdReport> for MmElpd {
    fn from(r: &ElpdReport) -> Self {
        Self { elpd: r.elpd, p_eff: r.p_eff, se: r.se, ic: r.ic, ic_se: r.ic_se }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(code: i32, msg: impl Into<String>) -> i32 {
    set_error(msg);
    code
}

fn fail_with(e: &Error) -> i32 {
    fail(multimorb::cli::exit_code(e), e.to_string())
}

fn guard(f: impl FnOnce() -> i32) -> i32 {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(code) => code,
        Err(_) => fail(MM_ERR_PANIC, "internal panic"),
    }
}

unsafe fn path_arg<'a>(p: *const c_char, name: &str) -> Result<&'a Path, i32> {
    if p.is_null() {
        return Err(fail(MM_ERR_NULL, format!("{name} is null")));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| fail(MM_ERR_CONFIG, format!("{name} is not UTF-8")))?;
    Ok(Path::new(s))
}

/// Builds a target from a TOML config and a dataset directory
/// (`respondents.csv`, `locations.csv`, `adjacency.csv`, `distance_<m>.csv`).
///
/// # Safety
/// `config_path` and `data_dir` must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mm_target_new(config_path: *const c_char, data_dir: *const c_char, out: *mut *mut MmTarget) -> i32 {
    guard(|| {
        if out.is_null() {
            return fail(MM_ERR_NULL, "out is null");
        }
        *out = ptr::null_mut();
        let (cfg_path, data) = match (path_arg(config_path, "config_path"), path_arg(data_dir, "data_dir")) {
            (Ok(c), Ok(d)) => (c, d),
            (Err(code), _) | (_, Err(code)) => return code,
        };
        let cfg = match RunConfig::load(cfg_path) {
            Ok(c) => c,
            Err(e) => return fail(MM_ERR_CONFIG, e.to_string()),
        };
        match PosteriorTarget::load(&cfg, data) {
            Ok(t) => {
                *out = Box::into_raw(Box::new(MmTarget { inner: t }));
                MM_OK
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// Length of the unconstrained parameter vector; 0 for a null handle.
///
/// # Safety
/// `target` must be null or a live handle from [`mm_target_new`].
#[no_mangle]
pub unsafe extern "C" fn mm_target_dim(target: *const MmTarget) -> usize {
    target.as_ref().map(|t| t.inner.dim()).unwrap_or(0)
}

/// Log posterior at `x` (length `n`). `grad` may be null; otherwise it receives `n` values.
///
/// # Safety
/// `x` must point to `n` doubles, `value` to one double and `grad`, when not null, to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn mm_target_log_posterior(
    target: *const MmTarget,
    x: *const f64,
    n: usize,
    value: *mut f64,
    grad: *mut f64,
) -> i32 {
    guard(|| {
        let Some(t) = target.as_ref() else {
            return fail(MM_ERR_NULL, "target is null");
        };
        if x.is_null() || value.is_null() {
            return fail(MM_ERR_NULL, "x or value is null");
        }
        if n != t.inner.dim() {
            return fail(MM_ERR_DATA, format!("expected {} coordinates, got {n}", t.inner.dim()));
        }
        let xs = std::slice::from_raw_parts(x, n);
        let result = if grad.is_null() {
            t.inner.log_posterior_value(xs).map(|v| (v, None))
        } else {
            t.inner.log_posterior(xs).map(|(v, g)| (v, Some(g)))
        };
        match result {
            Ok((v, g)) => {
                *value = v;
                if let Some(g) = g {
                    std::slice::from_raw_parts_mut(grad, n).copy_from_slice(&g);
                }
                MM_OK
            }
            Err(e) => fail_with(&e.into()),
        }
    })
}

/// Releases a target. Null is ignored.
///
/// # Safety
/// `target` must be null or a handle from [`mm_target_new`] not freed before.
#[no_mangle]
pub unsafe extern "C" fn mm_target_free(target: *mut MmTarget) {
    if !target.is_null() {
        drop(Box::from_raw(target));
    }
}

unsafe fn loglik_arg(loglik: *const f64, draws: usize, points: usize) -> Result<LogLikMatrix, i32> {
    if loglik.is_null() {
        return Err(fail(MM_ERR_NULL, "loglik is null"));
    }
    let flat = std::slice::from_raw_parts(loglik, draws * points);
    let rows: Vec<Vec<f64>> = flat.chunks(points.max(1)).map(|r| r.to_vec()).collect();
    LogLikMatrix::from_rows(&rows).map_err(|e| fail(MM_ERR_DATA, e.to_string()))
}

/// WAIC of a row-major `draws x points` log-likelihood matrix.
///
/// # Safety
/// `loglik` must point to `draws * points` doubles and `out` to one `MmElpd`.
#[no_mangle]
pub unsafe extern "C" fn mm_waic(loglik: *const f64, draws: usize, points: usize, out: *mut MmElpd) -> i32 {
    guard(|| {
        if out.is_null() {
            return fail(MM_ERR_NULL, "out is null");
        }
        let ll = match loglik_arg(loglik, draws, points) {
            Ok(m) => m,
            Err(code) => return code,
        };
        match evaluation::waic(&ll) {
            Ok(r) => {
                *out = MmElpd::from(&r);
                MM_OK
            }
            Err(e) => fail(MM_ERR_MODEL, e.to_string()),
        }
    })
}

/// PSIS-LOO of a row-major `draws x points` matrix. `pareto_k` may be null;
/// otherwise it receives one shape estimate per point.
///
/// # Safety
/// `loglik` must point to `draws * points` doubles, `out` to one `MmElpd`
/// and `pareto_k`, when not null, to `points` doubles.
#[no_mangle]
pub unsafe extern "C" fn mm_psis_loo(
    loglik: *const f64,
    draws: usize,
    points: usize,
    out: *mut MmElpd,
    pareto_k: *mut f64,
) -> i32 {
    guard(|| {
        if out.is_null() {
            return fail(MM_ERR_NULL, "out is null");
        }
        let ll = match loglik_arg(loglik, draws, points) {
            Ok(m) => m,
            Err(code) => return code,
        };
        match evaluation::psis_loo(&ll) {
            Ok(r) => {
                *out = MmElpd::from(&r);
                if let (false, Some(k)) = (pareto_k.is_null(), r.pareto_k.as_ref()) {
                    std::slice::from_raw_parts_mut(pareto_k, points).copy_from_slice(k);
                }
                MM_OK
            }
            Err(e) => fail(MM_ERR_MODEL, e.to_string()),
        }
    })
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length plus one, or 0 when
/// there is no error.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn mm_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else {
            return 0;
        };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len);
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n - 1) = 0;
        }
        bytes.len()
    })
}

/// Engine version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
