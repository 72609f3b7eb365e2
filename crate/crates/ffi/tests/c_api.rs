use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use censidx::sim::{calibrate_censoring_rate, generate_dataset, SimDesign};
use censidx_ffi::*;

fn last_error() -> String {
    let p = censidx_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

struct Columns {
    z: Vec<f64>,
    delta: Vec<u8>,
    x: Vec<f64>,
    n: usize,
    d: usize,
}

fn columns(n: usize) -> Columns {
    let design = SimDesign {
        n,
        ..Default::default()
    };
    let lambda = calibrate_censoring_rate(&design, 0.25).unwrap();
    let s = generate_dataset(&design, lambda, 1).unwrap();
    Columns {
        z: s.z().to_vec(),
        delta: s.delta().iter().map(|&b| b as u8).collect(),
        x: (0..s.n()).flat_map(|i| s.x_row(i).to_vec()).collect(),
        n: s.n(),
        d: s.d(),
    }
}

fn new_sample(c: &Columns) -> *mut CensidxSample {
    let mut sample = ptr::null_mut();
    let status = unsafe {
        censidx_sample_new(
            c.z.as_ptr(),
            c.delta.as_ptr(),
            c.x.as_ptr(),
            c.n,
            c.d,
            &mut sample,
        )
    };
    assert_eq!(status, CensidxStatus::Ok);
    sample
}

#[test]
fn fit_round_trip_matches_library() {
    let c = columns(100);
    let sample = new_sample(&c);

    let mut w = vec![0.0; c.n];
    assert_eq!(
        unsafe { censidx_km_weights(sample, w.as_mut_ptr(), w.len()) },
        CensidxStatus::Ok
    );
    let direct = censidx::CensoredSample::new(
        c.z.clone(),
        c.delta.iter().map(|&v| v != 0).collect(),
        c.x.clone(),
        c.d,
    )
    .unwrap();
    assert_eq!(w, censidx::survival::km_jump_weights(&direct).as_slice());

    let config = CString::new("parallel = false\n").unwrap();
    let mut fit = ptr::null_mut();
    assert_eq!(
        unsafe { censidx_fit(sample, config.as_ptr(), &mut fit) },
        CensidxStatus::Ok
    );
    assert!(censidx_last_error_message().is_null());

    let d = unsafe { censidx_fit_dim(fit) };
    assert_eq!(d, c.d);
    let mut theta = vec![0.0; d];
    assert_eq!(
        unsafe { censidx_fit_theta(fit, theta.as_mut_ptr(), d) },
        CensidxStatus::Ok
    );
    assert_eq!(theta[0], 1.0);
    let mut se = vec![0.0; d - 1];
    assert_eq!(
        unsafe { censidx_fit_standard_errors(fit, se.as_mut_ptr(), d - 1) },
        CensidxStatus::Ok
    );

    let mut scalars = CensidxFitScalars::default();
    assert_eq!(
        unsafe { censidx_fit_scalars(fit, &mut scalars) },
        CensidxStatus::Ok
    );
    assert!(scalars.tau_hat <= scalars.tau0 && scalars.h_hat > 0.0);

    let cfg = censidx::FitConfig {
        parallel: false,
        ..Default::default()
    };
    let reference = censidx::fit(&direct, &cfg).unwrap();
    assert_eq!(theta, reference.theta_hat);
    assert_eq!(scalars.h_hat, reference.h_hat);
    assert_eq!(scalars.n_retained, reference.n_retained);

    let mut json = ptr::null_mut();
    assert_eq!(
        unsafe { censidx_fit_to_json(fit, &mut json) },
        CensidxStatus::Ok
    );
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_owned();
    let parsed: censidx::IndexModelFit = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed.theta_hat, theta);

    unsafe {
        censidx_string_free(json);
        censidx_fit_free(fit);
        censidx_sample_free(sample);
    }
}

#[test]
fn null_pointers_are_reported() {
    let c = columns(30);
    let mut sample = ptr::null_mut();
    let status = unsafe {
        censidx_sample_new(
            ptr::null(),
            c.delta.as_ptr(),
            c.x.as_ptr(),
            c.n,
            c.d,
            &mut sample,
        )
    };
    assert_eq!(status, CensidxStatus::NullPointer);
    assert!(sample.is_null());
    assert!(last_error().contains("null"));

    let status = unsafe {
        censidx_sample_new(
            c.z.as_ptr(),
            c.delta.as_ptr(),
            c.x.as_ptr(),
            c.n,
            c.d,
            ptr::null_mut(),
        )
    };
    assert_eq!(status, CensidxStatus::NullPointer);

    let mut fit = ptr::null_mut();
    assert_eq!(
        unsafe { censidx_fit(ptr::null(), ptr::null(), &mut fit) },
        CensidxStatus::NullPointer
    );
    assert_eq!(unsafe { censidx_fit_dim(ptr::null()) }, 0);
    let mut out = 0.0;
    assert_eq!(
        unsafe { censidx_fit_theta(ptr::null(), &mut out, 1) },
        CensidxStatus::NullPointer
    );
    assert_eq!(
        unsafe { censidx_kernel_eval(0.0, 0, ptr::null_mut()) },
        CensidxStatus::NullPointer
    );

    unsafe {
        censidx_sample_free(ptr::null_mut());
        censidx_fit_free(ptr::null_mut());
        censidx_string_free(ptr::null_mut());
    }
}

#[test]
fn invalid_input_is_reported() {
    let z = [1.0, f64::NAN];
    let delta = [1u8, 0];
    let x = [0.5, 0.2];
    let mut sample = ptr::null_mut();
    let status =
        unsafe { censidx_sample_new(z.as_ptr(), delta.as_ptr(), x.as_ptr(), 2, 1, &mut sample) };
    assert_eq!(status, CensidxStatus::InvalidInput);
    assert!(sample.is_null());
    assert!(!last_error().is_empty());

    let mut out = 0.0;
    assert_eq!(
        unsafe { censidx_kernel_eval(0.0, 3, &mut out) },
        CensidxStatus::InvalidInput
    );
    assert_eq!(
        unsafe { censidx_kernel_eval(0.0, 0, &mut out) },
        CensidxStatus::Ok
    );
    assert!((out - 0.9).abs() < 1e-12);

    let c = columns(30);
    let sample = new_sample(&c);
    let mut short = vec![0.0; c.n - 1];
    assert_eq!(
        unsafe { censidx_km_weights(sample, short.as_mut_ptr(), short.len()) },
        CensidxStatus::InvalidInput
    );
    let bad = CString::new("radius = \"wide\"").unwrap();
    let mut fit = ptr::null_mut();
    assert_eq!(
        unsafe { censidx_fit(sample, bad.as_ptr(), &mut fit) },
        CensidxStatus::InvalidInput
    );
    assert!(fit.is_null());
    unsafe { censidx_sample_free(sample) };
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/censidx.h");
    let dir = tempfile::TempDir::new().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        r#"#include "censidx.h"
int main(void) {
    CensidxSample *s = NULL;
    CensidxFit *f = NULL;
    CensidxFitScalars sc;
    char *json = NULL;
    double z[1] = {0.0}, x[1] = {0.0}, k = 0.0;
    uint8_t d[1] = {1};
    CensidxStatus st = censidx_sample_new(z, d, x, 1, 1, &s);
    st = censidx_km_weights(s, z, 1);
    st = censidx_kernel_eval(0.0, 0, &k);
    st = censidx_fit(s, NULL, &f);
    st = censidx_fit_theta(f, z, censidx_fit_dim(f));
    st = censidx_fit_standard_errors(f, z, 1);
    st = censidx_fit_scalars(f, &sc);
    st = censidx_fit_to_json(f, &json);
    (void)censidx_last_error_message();
    censidx_string_free(json);
    censidx_fit_free(f);
    censidx_sample_free(s);
    return st == CENSIDX_STATUS_OK ? 0 : 1;
}
"#,
    )
    .unwrap();
    let include = std::path::Path::new(header).parent().unwrap();
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let status = match Command::new(compiler)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang])
            .arg("-I")
            .arg(include)
            .arg(&src)
            .status()
        {
            Ok(s) => s,
            Err(_) => {
                eprintln!("{compiler} not found; skipping");
                continue;
            }
        };
        assert!(status.success(), "{compiler} rejected the header");
    }
}
