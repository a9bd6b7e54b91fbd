//! C interface to the minbridge estimators.
//!
//! Panels and estimates are opaque handles owned by the caller and released
//! with `mb_panel_free` and `mb_estimate_free`. Every function returns an
//! [`MbStatus`]; on failure the message is available from
//! `mb_last_error_message` on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::{DMatrix, DVector};

use minbridge::bridge::LambdaRule;
use minbridge::harness::{estimate_method, DgpSpec, EstimatorKind, EstimatorOptions, MethodReport};
use minbridge::panel::{load_panel_csv, validate_panel, CsvSchema, PanelDataset};
use minbridge::Error;

/// Result code of every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MbStatus {
    Ok = 0,
    NullPointer = 1,
    /// Malformed input data, configuration or argument.
    InvalidArgument = 2,
    /// The data were well formed but the estimator could not be computed.
    EstimationFailed = 3,
    BufferTooSmall = 4,
    /// A Rust panic was caught at the boundary.
    Panic = 5,
}

/// Estimator selector; pass one of these values as the `method` argument.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MbMethod {
    Did = 0,
    Horizontal = 1,
    Vertical = 2,
    Factor4step = 3,
    BridgeIdentity = 4,
    BridgeTwoStage = 5,
    BridgePopulation = 6,
}

impl MbMethod {
    fn from_raw(raw: u32) -> Option<Self> {
        [
            MbMethod::Did,
            MbMethod::Horizontal,
            MbMethod::Vertical,
            MbMethod::Factor4step,
            MbMethod::BridgeIdentity,
            MbMethod::BridgeTwoStage,
            MbMethod::BridgePopulation,
        ]
        .into_iter()
        .find(|m| *m as u32 == raw)
    }

    fn kind(self) -> EstimatorKind {
        match self {
            MbMethod::Did => EstimatorKind::Did,
            MbMethod::Horizontal => EstimatorKind::Horizontal,
            MbMethod::Vertical => EstimatorKind::Vertical,
            MbMethod::Factor4step => EstimatorKind::Factor4step,
            MbMethod::BridgeIdentity => EstimatorKind::BridgeIdentity,
            MbMethod::BridgeTwoStage => EstimatorKind::BridgeTwoStage,
            MbMethod::BridgePopulation => EstimatorKind::BridgePopulation,
        }
    }
}

/// Tuning parameters. The penalty is `lambda_c * N^(-lambda_beta)`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MbOptions {
    pub lambda_c: f64,
    pub lambda_beta: f64,
    /// Confidence intervals have level `1 - rho`.
    pub rho: f64,
    /// Ridge penalty for the horizontal regression.
    pub ridge: f64,
    /// Rank for the four-step factor estimator.
    pub factor_rank: usize,
}

impl Default for MbOptions {
    fn default() -> Self {
        Self {
            lambda_c: 1.0,
            lambda_beta: 0.75,
            rho: 0.05,
            ridge: 0.0,
            factor_rank: 1,
        }
    }
}

/// Scalar results. Fields an estimator does not produce are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MbSummary {
    pub estimate: f64,
    pub sigma2_hat: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub lambda: f64,
    /// Length of the bridge coefficient vector, 0 for baselines.
    pub theta_len: usize,
}

/// Opaque panel handle.
pub struct MbPanel {
    inner: PanelDataset,
}

/// Opaque estimate handle.
pub struct MbEstimate {
    report: MethodReport,
    json: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(MbStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = if e.is_validation() {
            MbStatus::InvalidArgument
        } else {
            MbStatus::EstimationFailed
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(MbStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(MbStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MbStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            MbStatus::Panic
        }
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

fn check_panel(panel: PanelDataset) -> Result<Box<MbPanel>, Failure> {
    let report = validate_panel(&panel);
    if !report.is_ok() {
        return Err(invalid(format!(
            "panel failed validation: {:?}",
            report.issues
        )));
    }
    Ok(Box::new(MbPanel { inner: panel }))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or an empty string. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mb_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Default tuning parameters.
#[no_mangle]
pub extern "C" fn mb_options_default() -> MbOptions {
    MbOptions::default()
}

/// Builds a panel from dense arrays.
///
/// `outcomes` is row-major `n_units x (n_pre + 1 + n_post)`: pre periods
/// oldest first, then the target period, then the post periods.
/// `treated` holds one 0/1 flag per unit. `covariates` is row-major
/// `n_units x n_cov` and may be null when `n_cov` is 0.
///
/// # Safety
/// Pointers must be valid for the stated lengths; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mb_panel_from_arrays(
    n_units: usize,
    n_pre: usize,
    n_post: usize,
    outcomes: *const f64,
    treated: *const u8,
    n_cov: usize,
    covariates: *const f64,
    out: *mut *mut MbPanel,
) -> MbStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        if outcomes.is_null() {
            return Err(null("outcomes"));
        }
        if treated.is_null() {
            return Err(null("treated"));
        }
        if n_cov > 0 && covariates.is_null() {
            return Err(null("covariates"));
        }
        if n_units == 0 {
            return Err(invalid("n_units must be positive"));
        }
        let t = n_pre + 1 + n_post;
        let len = n_units
            .checked_mul(t)
            .ok_or_else(|| invalid("panel size overflows"))?;
        let y = DMatrix::from_row_slice(n_units, t, std::slice::from_raw_parts(outcomes, len));
        let flags = std::slice::from_raw_parts(treated, n_units);
        if let Some(bad) = flags.iter().find(|&&f| f > 1) {
            return Err(invalid(format!("treatment flag {bad} is not 0 or 1")));
        }
        let cov = if n_cov == 0 {
            DMatrix::zeros(n_units, 0)
        } else {
            let len = n_units
                .checked_mul(n_cov)
                .ok_or_else(|| invalid("covariate size overflows"))?;
            DMatrix::from_row_slice(n_units, n_cov, std::slice::from_raw_parts(covariates, len))
        };
        let panel = PanelDataset::new(
            flags.iter().map(|&f| f == 1).collect(),
            cov,
            y.columns(0, n_pre).into_owned(),
            DVector::from_column_slice(y.column(n_pre).as_slice()),
            y.columns(n_pre + 1, n_post).into_owned(),
        )?;
        *out = Box::into_raw(check_panel(panel)?);
        Ok(())
    })
}

/// Loads a long-format CSV panel with columns `unit`, `time`, `y`, `a`
/// (0/1 treatment) and optional covariates `x1`, `x2`, ...
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mb_panel_load_csv(
    path: *const c_char,
    out: *mut *mut MbPanel,
) -> MbStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let path = c_str(path, "path")?;
        let panel = load_panel_csv(path, &CsvSchema::default())?;
        *out = Box::into_raw(check_panel(panel)?);
        Ok(())
    })
}

/// Draws a synthetic panel from a TOML data-generating configuration.
///
/// # Safety
/// `config_toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mb_panel_simulate(
    config_toml: *const c_char,
    seed: u64,
    out: *mut *mut MbPanel,
) -> MbStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let text = c_str(config_toml, "config_toml")?;
        let spec: DgpSpec = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        let (panel, _) = spec.simulate(seed)?;
        *out = Box::into_raw(Box::new(MbPanel { inner: panel }));
        Ok(())
    })
}

/// Writes the panel dimensions. Any output pointer may be null.
///
/// # Safety
/// `panel` must come from this library; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn mb_panel_dims(
    panel: *const MbPanel,
    n_units: *mut usize,
    n_pre: *mut usize,
    n_post: *mut usize,
    n_treated: *mut usize,
) -> MbStatus {
    guard(|| {
        let p = &panel.as_ref().ok_or_else(|| null("panel"))?.inner;
        for (dst, v) in [
            (n_units, p.n_units()),
            (n_pre, p.n_pre()),
            (n_post, p.n_post()),
            (n_treated, p.n_treated()),
        ] {
            if let Some(d) = dst.as_mut() {
                *d = v;
            }
        }
        Ok(())
    })
}

/// Releases a panel. Null is a no-op.
///
/// # Safety
/// `panel` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mb_panel_free(panel: *mut MbPanel) {
    if !panel.is_null() {
        drop(Box::from_raw(panel));
    }
}

/// Runs one estimator on the panel. `options` may be null for defaults.
///
/// # Safety
/// `panel` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mb_estimate(
    panel: *const MbPanel,
    method: u32,
    options: *const MbOptions,
    out: *mut *mut MbEstimate,
) -> MbStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let p = &panel.as_ref().ok_or_else(|| null("panel"))?.inner;
        let method = MbMethod::from_raw(method)
            .ok_or_else(|| invalid(format!("unknown method {method}")))?;
        let o = options.as_ref().copied().unwrap_or_default();
        let opts = EstimatorOptions {
            lambda: LambdaRule {
                c: o.lambda_c,
                beta: o.lambda_beta,
            },
            rho: o.rho,
            ridge: o.ridge,
            factor_rank: Some(o.factor_rank),
            holdout_pre: 0,
        };
        let report = estimate_method(method.kind(), p, &opts)?;
        let json = CString::new(report.json.to_string()).map_err(|e| invalid(e.to_string()))?;
        *out = Box::into_raw(Box::new(MbEstimate { report, json }));
        Ok(())
    })
}

/// Writes the scalar results.
///
/// # Safety
/// `est` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mb_estimate_summary(
    est: *const MbEstimate,
    out: *mut MbSummary,
) -> MbStatus {
    guard(|| {
        let e = est.as_ref().ok_or_else(|| null("estimate"))?;
        let out = out_ptr(out, "out")?;
        let o = &e.report.outcome;
        let (lo, hi) = o.ci.unwrap_or((f64::NAN, f64::NAN));
        *out = MbSummary {
            estimate: o.estimate,
            sigma2_hat: o.sigma2_hat.unwrap_or(f64::NAN),
            ci_lower: lo,
            ci_upper: hi,
            lambda: o.lambda.unwrap_or(f64::NAN),
            theta_len: e.report.theta.as_ref().map_or(0, |t| t.len()),
        };
        Ok(())
    })
}

/// Copies the stacked bridge coefficients into `buf`. `len_out` always
/// receives the full length; `BufferTooSmall` is returned when `cap` is
/// short, in which case nothing is copied. Baselines have length 0.
///
/// # Safety
/// `buf` must be writable for `cap` values (or null when `cap` is 0).
#[no_mangle]
pub unsafe extern "C" fn mb_estimate_theta(
    est: *const MbEstimate,
    buf: *mut f64,
    cap: usize,
    len_out: *mut usize,
) -> MbStatus {
    guard(|| {
        let e = est.as_ref().ok_or_else(|| null("estimate"))?;
        let len_out = out_ptr(len_out, "len_out")?;
        let theta = e.report.theta.as_ref().map_or(&[][..], |t| t.as_slice());
        *len_out = theta.len();
        if theta.is_empty() {
            return Ok(());
        }
        if cap < theta.len() {
            return Err(Failure(
                MbStatus::BufferTooSmall,
                format!("theta needs {} values, buffer holds {cap}", theta.len()),
            ));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        ptr::copy_nonoverlapping(theta.as_ptr(), buf, theta.len());
        Ok(())
    })
}

/// Copies the JSON summary, NUL-terminated, into `buf`. `len_out` always
/// receives the string length without the terminator; `BufferTooSmall`
/// is returned when `cap` cannot hold it plus the terminator.
///
/// # Safety
/// `buf` must be writable for `cap` bytes (or null when `cap` is 0).
#[no_mangle]
pub unsafe extern "C" fn mb_estimate_json(
    est: *const MbEstimate,
    buf: *mut c_char,
    cap: usize,
    len_out: *mut usize,
) -> MbStatus {
    guard(|| {
        let e = est.as_ref().ok_or_else(|| null("estimate"))?;
        let len_out = out_ptr(len_out, "len_out")?;
        let bytes = e.json.as_bytes_with_nul();
        *len_out = bytes.len() - 1;
        if cap < bytes.len() {
            return Err(Failure(
                MbStatus::BufferTooSmall,
                format!("json needs {} bytes, buffer holds {cap}", bytes.len()),
            ));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, bytes.len());
        Ok(())
    })
}

/// Releases an estimate. Null is a no-op.
///
/// # Safety
/// `est` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mb_estimate_free(est: *mut MbEstimate) {
    if !est.is_null() {
        drop(Box::from_raw(est));
    }
}
