//! C interface to the estimator.
//!
//! Every function returns a [`CensidxStatus`]; on failure the message is
//! available from [`censidx_last_error_message`] on the same thread. Handles
//! are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use censidx::{CensoredSample, Error, FitConfig, IndexModelFit};

/// Result codes. Input and numerical failures match the command-line exit
/// codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CensidxStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Numerical = 3,
    Internal = 4,
    Panic = 5,
}

/// Opaque censored sample.
pub struct CensidxSample {
    inner: CensoredSample,
}

/// Opaque fitted model.
pub struct CensidxFit {
    inner: IndexModelFit,
}

/// Scalar summaries of a fit.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CensidxFitScalars {
    pub h_hat: f64,
    pub tau_hat: f64,
    pub tau0: f64,
    pub e2: f64,
    pub e2_sandwich: f64,
    pub loglik: f64,
    pub n_retained: usize,
    pub weight_inf: f64,
    pub weight_tau: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> CensidxStatus {
    match err.exit_code() {
        2 => CensidxStatus::InvalidInput,
        3 => CensidxStatus::Numerical,
        _ => CensidxStatus::Internal,
    }
}

fn guard<F: FnOnce() -> Result<(), (CensidxStatus, String)>>(f: F) -> CensidxStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CensidxStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside censidx");
            CensidxStatus::Panic
        }
    }
}

fn lift(e: Error) -> (CensidxStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (CensidxStatus, String) {
    (CensidxStatus::NullPointer, format!("{what} is null"))
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn censidx_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Builds a sample from `n` times, `n` flags (nonzero = uncensored) and an
/// `n × d` row-major covariate matrix.
///
/// # Safety
/// `z` and `delta` must point to `n` elements, `x` to `n * d` elements, and
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn censidx_sample_new(
    z: *const f64,
    delta: *const u8,
    x: *const f64,
    n: usize,
    d: usize,
    out: *mut *mut CensidxSample,
) -> CensidxStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if z.is_null() || delta.is_null() || x.is_null() {
            return Err(null("input array"));
        }
        let len = n
            .checked_mul(d)
            .ok_or((CensidxStatus::InvalidInput, "n * d overflows".to_string()))?;
        let z = std::slice::from_raw_parts(z, n).to_vec();
        let delta = std::slice::from_raw_parts(delta, n)
            .iter()
            .map(|&v| v != 0)
            .collect();
        let x = std::slice::from_raw_parts(x, len).to_vec();
        let inner = CensoredSample::new(z, delta, x, d).map_err(lift)?;
        *out = Box::into_raw(Box::new(CensidxSample { inner }));
        Ok(())
    })
}

/// # Safety
/// `sample` must come from [`censidx_sample_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn censidx_sample_free(sample: *mut CensidxSample) {
    if !sample.is_null() {
        drop(Box::from_raw(sample));
    }
}

/// Kaplan-Meier jump weights in input order; `out` holds `len >= n` values.
///
/// # Safety
/// `sample` must be a live handle and `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn censidx_km_weights(
    sample: *const CensidxSample,
    out: *mut f64,
    len: usize,
) -> CensidxStatus {
    guard(|| {
        let s = sample.as_ref().ok_or_else(|| null("sample"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let w = censidx::survival::km_jump_weights(&s.inner);
        if len < w.len() {
            return Err((
                CensidxStatus::InvalidInput,
                format!("output holds {len} values, need {}", w.len()),
            ));
        }
        std::slice::from_raw_parts_mut(out, w.len()).copy_from_slice(w.as_slice());
        Ok(())
    })
}

/// The fourth-order kernel (`order` 0) or its first or second derivative.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn censidx_kernel_eval(u: f64, order: u8, out: *mut f64) -> CensidxStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = censidx::kernel::kernel_eval(u, order).map_err(lift)?;
        Ok(())
    })
}

/// Fits the model. `config_toml` is a TOML fit configuration or null for
/// the defaults.
///
/// # Safety
/// `sample` must be a live handle, `config_toml` null or a NUL-terminated
/// string, and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn censidx_fit(
    sample: *const CensidxSample,
    config_toml: *const c_char,
    out: *mut *mut CensidxFit,
) -> CensidxStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let s = sample.as_ref().ok_or_else(|| null("sample"))?;
        let config = if config_toml.is_null() {
            FitConfig::default()
        } else {
            let text = CStr::from_ptr(config_toml)
                .to_str()
                .map_err(|e| (CensidxStatus::InvalidInput, e.to_string()))?;
            toml::from_str(text).map_err(|e| (CensidxStatus::InvalidInput, e.to_string()))?
        };
        let inner = censidx::fit(&s.inner, &config).map_err(lift)?;
        *out = Box::into_raw(Box::new(CensidxFit { inner }));
        Ok(())
    })
}

/// # Safety
/// `fit` must come from [`censidx_fit`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn censidx_fit_free(fit: *mut CensidxFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Dimension `d` of the index coefficient; 0 for a null handle.
///
/// # Safety
/// `fit` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn censidx_fit_dim(fit: *const CensidxFit) -> usize {
    fit.as_ref().map_or(0, |f| f.inner.theta_hat.len())
}

unsafe fn copy_out(src: &[f64], out: *mut f64, len: usize) -> Result<(), (CensidxStatus, String)> {
    if out.is_null() {
        return Err(null("out"));
    }
    if len < src.len() {
        return Err((
            CensidxStatus::InvalidInput,
            format!("output holds {len} values, need {}", src.len()),
        ));
    }
    std::slice::from_raw_parts_mut(out, src.len()).copy_from_slice(src);
    Ok(())
}

/// Estimated index coefficient, `d` values with the first equal to one.
///
/// # Safety
/// `fit` must be a live handle and `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn censidx_fit_theta(
    fit: *const CensidxFit,
    out: *mut f64,
    len: usize,
) -> CensidxStatus {
    guard(|| {
        let f = fit.as_ref().ok_or_else(|| null("fit"))?;
        copy_out(&f.inner.theta_hat, out, len)
    })
}

/// Standard errors of the `d - 1` free coefficients.
///
/// # Safety
/// `fit` must be a live handle and `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn censidx_fit_standard_errors(
    fit: *const CensidxFit,
    out: *mut f64,
    len: usize,
) -> CensidxStatus {
    guard(|| {
        let f = fit.as_ref().ok_or_else(|| null("fit"))?;
        let se = censidx::standard_errors(&f.inner, f.inner.n);
        copy_out(&se.se, out, len)
    })
}

/// # Safety
/// `fit` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn censidx_fit_scalars(
    fit: *const CensidxFit,
    out: *mut CensidxFitScalars,
) -> CensidxStatus {
    guard(|| {
        let f = &fit.as_ref().ok_or_else(|| null("fit"))?.inner;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = CensidxFitScalars {
            h_hat: f.h_hat,
            tau_hat: f.tau_hat,
            tau0: f.tau0,
            e2: f.e2,
            e2_sandwich: f.e2_sandwich,
            loglik: f.loglik.value,
            n_retained: f.n_retained,
            weight_inf: f.weight_inf,
            weight_tau: f.weight_tau,
        };
        Ok(())
    })
}

/// The full fit as a JSON document. Release it with [`censidx_string_free`].
///
/// # Safety
/// `fit` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn censidx_fit_to_json(
    fit: *const CensidxFit,
    out: *mut *mut c_char,
) -> CensidxStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let f = fit.as_ref().ok_or_else(|| null("fit"))?;
        let json = serde_json::to_string(&f.inner)
            .map_err(|e| (CensidxStatus::Internal, e.to_string()))?;
        let c = CString::new(json).map_err(|e| (CensidxStatus::Internal, e.to_string()))?;
        *out = c.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn censidx_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
