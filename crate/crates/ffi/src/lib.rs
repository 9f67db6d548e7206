//! C ABI over the deconfounding pipelines, anchor regression and the
//! doubly debiased Lasso. Matrices cross the boundary as row-major double
//! buffers; fitted models travel as opaque handles; every call returns a
//! status code and leaves a thread-local message for the last failure.

use std::cell::RefCell;
use std::ffi::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use deconfound::anchor::{self, AnchorConfig, Gamma};
use deconfound::deconfound::{lava, pca_adjust_lasso, trim_lasso, CvOptions, LambdaChoice};
use deconfound::inference::{dd_lasso, DdLassoConfig};
use deconfound::linalg::{Matrix, Vector};
use deconfound::spectral::{Lambda2, Tau};
use deconfound::Error;

/// Status codes mirrored by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DcStatus {
    DcOk = 0,
    DcInvalidInput = 1,
    DcDegenerate = 2,
    DcInstability = 3,
    DcParse = 4,
    DcConfig = 5,
    DcNullPointer = 6,
    DcPanic = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &Error) -> DcStatus {
    match err {
        Error::InvalidInput(_) => DcStatus::DcInvalidInput,
        Error::Degenerate(_) => DcStatus::DcDegenerate,
        Error::Instability(_) => DcStatus::DcInstability,
        Error::Parse(_) => DcStatus::DcParse,
        Error::Config(_) => DcStatus::DcConfig,
    }
}

fn fail(err: Error) -> DcStatus {
    let code = status_of(&err);
    set_error(err.to_string());
    code
}

/// Copy the last error message of this thread into `buf` (NUL terminated,
/// truncated to `cap`); returns the full message length in bytes.
#[no_mangle]
pub unsafe extern "C" fn dc_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

unsafe fn matrix_from(ptr: *const f64, rows: usize, cols: usize) -> Option<Matrix> {
    if ptr.is_null() || rows == 0 || cols == 0 {
        return None;
    }
    let slice = std::slice::from_raw_parts(ptr, rows * cols);
    Some(Matrix::from_row_slice(rows, cols, slice))
}

unsafe fn vector_from(ptr: *const f64, len: usize) -> Option<Vector> {
    if ptr.is_null() || len == 0 {
        return None;
    }
    Some(Vector::from_column_slice(std::slice::from_raw_parts(ptr, len)))
}

fn guard<F: FnOnce() -> DcStatus>(f: F) -> DcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(code) => code,
        Err(_) => {
            set_error("internal panic");
            DcStatus::DcPanic
        }
    }
}

/// Opaque fitted model handle.
pub struct DcFit {
    beta: Vec<f64>,
    dense: Option<Vec<f64>>,
    intercept: f64,
    lambda: f64,
}

fn finish_fit(fit: deconfound::deconfound::DeconfoundFit, out: *mut *mut DcFit) -> DcStatus {
    let handle = Box::new(DcFit {
        beta: fit.beta.iter().copied().collect(),
        dense: fit.dense_part.map(|d| d.iter().copied().collect()),
        intercept: fit.intercept,
        lambda: fit.lambda,
    });
    unsafe { *out = Box::into_raw(handle) };
    DcStatus::DcOk
}

fn lambda_choice(lambda: f64, use_cv: i32, seed: u64) -> LambdaChoice {
    if use_cv != 0 {
        LambdaChoice::Cv(CvOptions { seed, ..Default::default() })
    } else {
        LambdaChoice::Fixed(lambda)
    }
}

/// Trim-transform Lasso. `x` is row-major `n * p`; `tau <= 0` selects the
/// median singular value. With `use_cv` non-zero, `lambda` is ignored and
/// chosen by cross-validation seeded from `seed`.
#[no_mangle]
pub unsafe extern "C" fn dc_trim_lasso(
    x: *const f64,
    n: usize,
    p: usize,
    y: *const f64,
    tau: f64,
    lambda: f64,
    use_cv: i32,
    seed: u64,
    out: *mut *mut DcFit,
) -> DcStatus {
    guard(|| {
        let (Some(xm), Some(yv)) = (matrix_from(x, n, p), vector_from(y, n)) else {
            set_error("null or empty input buffer");
            return DcStatus::DcNullPointer;
        };
        if out.is_null() {
            set_error("null output handle");
            return DcStatus::DcNullPointer;
        }
        let tau = if tau > 0.0 { Tau::Value(tau) } else { Tau::Median };
        match trim_lasso(&xm, &yv, tau, &lambda_choice(lambda, use_cv, seed)) {
            Ok(fit) => finish_fit(fit, out),
            Err(e) => fail(e),
        }
    })
}

/// PCA-adjustment Lasso removing the `qhat` leading singular directions.
#[no_mangle]
pub unsafe extern "C" fn dc_pca_lasso(
    x: *const f64,
    n: usize,
    p: usize,
    y: *const f64,
    qhat: usize,
    lambda: f64,
    use_cv: i32,
    seed: u64,
    out: *mut *mut DcFit,
) -> DcStatus {
    guard(|| {
        let (Some(xm), Some(yv)) = (matrix_from(x, n, p), vector_from(y, n)) else {
            set_error("null or empty input buffer");
            return DcStatus::DcNullPointer;
        };
        if out.is_null() {
            set_error("null output handle");
            return DcStatus::DcNullPointer;
        }
        match pca_adjust_lasso(&xm, &yv, qhat, &lambda_choice(lambda, use_cv, seed)) {
            Ok(fit) => finish_fit(fit, out),
            Err(e) => fail(e),
        }
    })
}

/// Lava sparse-plus-dense fit; `lambda2 <= 0` selects the median rule.
#[no_mangle]
pub unsafe extern "C" fn dc_lava(
    x: *const f64,
    n: usize,
    p: usize,
    y: *const f64,
    lambda1: f64,
    lambda2: f64,
    out: *mut *mut DcFit,
) -> DcStatus {
    guard(|| {
        let (Some(xm), Some(yv)) = (matrix_from(x, n, p), vector_from(y, n)) else {
            set_error("null or empty input buffer");
            return DcStatus::DcNullPointer;
        };
        if out.is_null() {
            set_error("null output handle");
            return DcStatus::DcNullPointer;
        }
        let l2 = if lambda2 > 0.0 { Lambda2::Value(lambda2) } else { Lambda2::MedianRule };
        match lava(&xm, &yv, lambda1, l2) {
            Ok(fit) => finish_fit(fit, out),
            Err(e) => fail(e),
        }
    })
}

/// Number of coefficients held by a fit handle.
#[no_mangle]
pub unsafe extern "C" fn dc_fit_dim(fit: *const DcFit) -> usize {
    if fit.is_null() {
        return 0;
    }
    (*fit).beta.len()
}

/// Copy the sparse coefficients into `out` (length `dc_fit_dim`).
#[no_mangle]
pub unsafe extern "C" fn dc_fit_beta(fit: *const DcFit, out: *mut f64, len: usize) -> DcStatus {
    if fit.is_null() || out.is_null() {
        set_error("null pointer");
        return DcStatus::DcNullPointer;
    }
    let beta = &(*fit).beta;
    if len < beta.len() {
        set_error("output buffer too small");
        return DcStatus::DcInvalidInput;
    }
    ptr::copy_nonoverlapping(beta.as_ptr(), out, beta.len());
    DcStatus::DcOk
}

/// Copy the dense part (Lava only) into `out`.
#[no_mangle]
pub unsafe extern "C" fn dc_fit_dense_part(
    fit: *const DcFit,
    out: *mut f64,
    len: usize,
) -> DcStatus {
    if fit.is_null() || out.is_null() {
        set_error("null pointer");
        return DcStatus::DcNullPointer;
    }
    let Some(dense) = &(*fit).dense else {
        set_error("fit has no dense part");
        return DcStatus::DcInvalidInput;
    };
    if len < dense.len() {
        set_error("output buffer too small");
        return DcStatus::DcInvalidInput;
    }
    ptr::copy_nonoverlapping(dense.as_ptr(), out, dense.len());
    DcStatus::DcOk
}

#[no_mangle]
pub unsafe extern "C" fn dc_fit_intercept(fit: *const DcFit) -> f64 {
    if fit.is_null() {
        return f64::NAN;
    }
    (*fit).intercept
}

/// The l1 penalty the fit was solved at (after any cross-validation).
#[no_mangle]
pub unsafe extern "C" fn dc_fit_lambda(fit: *const DcFit) -> f64 {
    if fit.is_null() {
        return f64::NAN;
    }
    (*fit).lambda
}

#[no_mangle]
pub unsafe extern "C" fn dc_fit_free(fit: *mut DcFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Anchor regression. `a` is row-major `n * r`. A non-zero `infinite`
/// requests the lexicographic limit and ignores `gamma`; `beta_out` must
/// hold `p` doubles; `objective_out` may be null.
#[no_mangle]
pub unsafe extern "C" fn dc_anchor_fit(
    x: *const f64,
    n: usize,
    p: usize,
    y: *const f64,
    a: *const f64,
    r: usize,
    gamma: f64,
    infinite: i32,
    lambda: f64,
    beta_out: *mut f64,
    objective_out: *mut f64,
) -> DcStatus {
    guard(|| {
        let (Some(xm), Some(yv), Some(am)) =
            (matrix_from(x, n, p), vector_from(y, n), matrix_from(a, n, r))
        else {
            set_error("null or empty input buffer");
            return DcStatus::DcNullPointer;
        };
        if beta_out.is_null() {
            set_error("null output buffer");
            return DcStatus::DcNullPointer;
        }
        let g = if infinite != 0 { Gamma::Infinity } else { Gamma::Finite(gamma) };
        let mut cfg = AnchorConfig::new(g);
        cfg.lambda = lambda;
        match anchor::anchor_fit(&xm, &yv, &am, &cfg) {
            Ok(fit) => {
                for (j, &b) in fit.beta.iter().enumerate() {
                    *beta_out.add(j) = b;
                }
                if !objective_out.is_null() {
                    *objective_out = fit.anchor_objective;
                }
                DcStatus::DcOk
            }
            Err(e) => fail(e),
        }
    })
}

/// One coordinate's confidence interval from the doubly debiased Lasso.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DcInference {
    pub estimate: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
}

/// Doubly debiased Lasso for coordinate `j` with Trim transforms and
/// cross-validated penalties seeded from `seed`.
#[no_mangle]
pub unsafe extern "C" fn dc_dd_lasso(
    x: *const f64,
    n: usize,
    p: usize,
    y: *const f64,
    j: usize,
    level: f64,
    seed: u64,
    out: *mut DcInference,
) -> DcStatus {
    guard(|| {
        let (Some(xm), Some(yv)) = (matrix_from(x, n, p), vector_from(y, n)) else {
            set_error("null or empty input buffer");
            return DcStatus::DcNullPointer;
        };
        if out.is_null() {
            set_error("null output pointer");
            return DcStatus::DcNullPointer;
        }
        let cv = CvOptions { seed, ..Default::default() };
        let cfg = DdLassoConfig {
            lambda_y: LambdaChoice::Cv(cv.clone()),
            lambda_nodewise: LambdaChoice::Cv(cv),
            confidence_level: level,
            ..Default::default()
        };
        match dd_lasso(&xm, &yv, j, &cfg) {
            Ok(res) => {
                *out = DcInference {
                    estimate: res.estimate,
                    se: res.se,
                    ci_low: res.ci_low,
                    ci_high: res.ci_high,
                    p_value: res.p_value,
                };
                DcStatus::DcOk
            }
            Err(e) => fail(e),
        }
    })
}
