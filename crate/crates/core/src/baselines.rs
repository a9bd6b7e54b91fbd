//! Comparison estimators: difference-in-differences, horizontal and
//! vertical regressions, and four-step factor imputation, plus analytic
//! bias terms for the two regressions.
//!
//! The regressions run without an intercept unless asked; with a fixed
//! panel dimension both carry an errors-in-variables bias that does not
//! vanish as the other dimension grows.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::dgp::{factor_latent_moments, FactorDgpConfig, GroundTruth, NoiseDependence};
use crate::error::{Error, Result};
use crate::numerics::{eig_extremes, singular_values, spd_solve, symmetrize};
use crate::panel::PanelDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Did,
    Horizontal,
    Vertical,
    Factor4Step,
}

/// Estimated factor pieces of the four-step method.
#[derive(Debug, Clone)]
pub struct FactorPieces {
    /// N x r eigenvectors of the outcome second-moment matrix.
    pub u_tilde: DMatrix<f64>,
    /// Target-period loadings regressed on `u_tilde` over controls.
    pub v0_tilde: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct BaselineEstimate {
    pub method: BaselineMethod,
    pub gamma_hat: f64,
    /// Horizontal coefficients on `(Y_pre; X)`, intercept last if used.
    pub theta: Option<DVector<f64>>,
    /// Vertical weights on control units, intercept last if used.
    pub weights: Option<DVector<f64>>,
    pub factors: Option<FactorPieces>,
    /// Set when the vertical regression fell back to a ridge penalty.
    pub ridge_fallback: bool,
}

impl BaselineEstimate {
    fn new(method: BaselineMethod, gamma_hat: f64) -> Self {
        Self {
            method,
            gamma_hat,
            theta: None,
            weights: None,
            factors: None,
            ridge_fallback: false,
        }
    }
}

fn require_groups(data: &PanelDataset) -> Result<(Vec<usize>, Vec<usize>)> {
    let (treated, control) = data.group_indices();
    if treated.is_empty() {
        return Err(Error::DegenerateGroup("no treated units".into()));
    }
    if control.is_empty() {
        return Err(Error::DegenerateGroup("no control units".into()));
    }
    Ok((treated, control))
}

fn mean_of(v: &DVector<f64>, idx: &[usize]) -> f64 {
    idx.iter().map(|&i| v[i]).sum::<f64>() / idx.len() as f64
}

/// Treated pre-period mean minus control pre-period mean plus control
/// target-period mean.
pub fn estimate_did(data: &PanelDataset) -> Result<BaselineEstimate> {
    let (treated, control) = require_groups(data)?;
    let t0 = data.n_pre() as f64;
    let pre_avg = data.y_pre().column_sum() / t0;
    let gamma = mean_of(&pre_avg, &treated) - mean_of(&pre_avg, &control)
        + mean_of(data.y_target(), &control);
    Ok(BaselineEstimate::new(BaselineMethod::Did, gamma))
}

/// Influence-function variance and Wald interval for the
/// difference-in-differences estimate of the sample target.
///
/// With `d_i = mean_pre(Y_i) - Y_i0`, the error is
/// `mean_C(d) - mean_T(d)`; the variance sums the two group variances.
/// Valid when the treatment effect at period 0 is homogeneous.
pub fn did_inference(data: &PanelDataset, rho: f64) -> Result<(f64, (f64, f64))> {
    let (treated, control) = require_groups(data)?;
    let est = estimate_did(data)?;
    let n = data.n_units() as f64;
    let d = data.y_pre().column_sum() / data.n_pre() as f64 - data.y_target();
    let (dt, dc) = (mean_of(&d, &treated), mean_of(&d, &control));
    let (p1, p0) = (treated.len() as f64 / n, control.len() as f64 / n);
    let psi = DVector::from_fn(data.n_units(), |i, _| {
        if data.treatment()[i] {
            -(d[i] - dt) / p1
        } else {
            (d[i] - dc) / p0
        }
    });
    crate::bridge::variance_and_ci(&psi, est.gamma_hat, rho)
}

/// Options shared by the two regressions.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RegressionOptions {
    /// Ridge penalty on the normal equations. For the vertical regression
    /// `None` means unpenalized when `T0 > N0` and a small flagged ridge
    /// otherwise.
    pub ridge: Option<f64>,
    pub intercept: bool,
}

fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>, ridge: f64) -> Result<DVector<f64>> {
    let (n, p) = x.shape();
    if ridge > 0.0 && n < p {
        // (X'X + rI)^-1 X'y = X'(XX' + rI)^-1 y, an n x n solve.
        let gram = x * x.transpose() + DMatrix::identity(n, n) * ridge;
        let sol = spd_solve(&gram, &DMatrix::from_column_slice(n, 1, y.as_slice()))?;
        return Ok(x.transpose() * sol.column(0));
    }
    let gram = x.transpose() * x + DMatrix::identity(p, p) * ridge;
    let rhs = x.transpose() * y;
    let sol =
        spd_solve(&gram, &DMatrix::from_column_slice(p, 1, rhs.as_slice())).map_err(
            |e| match e {
                Error::SingularSystem => {
                    Error::SingularDesign(format!("{p}-column normal equations are singular"))
                }
                other => other,
            },
        )?;
    Ok(sol.column(0).into_owned())
}

fn with_intercept(x: DMatrix<f64>, intercept: bool) -> DMatrix<f64> {
    if intercept {
        let n = x.ncols();
        x.insert_column(n, 1.0)
    } else {
        x
    }
}

fn check_ridge(ridge: f64) -> Result<()> {
    if ridge >= 0.0 && ridge.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "ridge penalty {ridge} must be finite and nonnegative"
        )))
    }
}

/// Regresses control target outcomes on control `(Y_pre; X)` and averages
/// the fitted transform over treated units.
pub fn estimate_horizontal(data: &PanelDataset, ridge: f64) -> Result<BaselineEstimate> {
    estimate_horizontal_with(
        data,
        &RegressionOptions {
            ridge: Some(ridge),
            intercept: false,
        },
    )
}

pub fn estimate_horizontal_with(
    data: &PanelDataset,
    opts: &RegressionOptions,
) -> Result<BaselineEstimate> {
    let (treated, control) = require_groups(data)?;
    let ridge = opts.ridge.unwrap_or(0.0);
    check_ridge(ridge)?;
    let x = with_intercept(data.w_matrix(), opts.intercept);
    if ridge == 0.0 && control.len() <= x.ncols() {
        return Err(Error::SingularDesign(format!(
            "{} control units for {} regressors",
            control.len(),
            x.ncols()
        )));
    }
    let xc = x.select_rows(&control);
    let yc = data.y_target().select_rows(&control);
    let theta = least_squares(&xc, &yc, ridge)?;
    let fitted = &x * &theta;
    let mut est = BaselineEstimate::new(BaselineMethod::Horizontal, mean_of(&fitted, &treated));
    est.theta = Some(theta);
    Ok(est)
}

/// Regresses the treated-average pre-period path on control paths across
/// time and applies the weights to control target outcomes.
pub fn estimate_vertical(data: &PanelDataset) -> Result<BaselineEstimate> {
    estimate_vertical_with(data, &RegressionOptions::default())
}

pub fn estimate_vertical_with(
    data: &PanelDataset,
    opts: &RegressionOptions,
) -> Result<BaselineEstimate> {
    let (treated, control) = require_groups(data)?;
    // T0 x N0: rows are periods, columns are control units.
    let yc = data.y_pre().select_rows(&control).transpose();
    let x = with_intercept(yc, opts.intercept);
    let target = data.y_pre().select_rows(&treated).row_sum().transpose() / treated.len() as f64;
    let (ridge, fallback) = match opts.ridge {
        Some(r) => {
            check_ridge(r)?;
            if r == 0.0 && data.n_pre() <= x.ncols() {
                return Err(Error::SingularDesign(format!(
                    "{} pre periods for {} regressors",
                    data.n_pre(),
                    x.ncols()
                )));
            }
            (r, false)
        }
        None if data.n_pre() > x.ncols() => (0.0, false),
        None => {
            let trace = x.iter().map(|v| v * v).sum::<f64>();
            (1e-6 * trace / x.ncols() as f64, true)
        }
    };
    let w = least_squares(&x, &target, ridge)?;
    let mut y0 = data.y_target().select_rows(&control);
    if opts.intercept {
        y0 = y0.insert_row(control.len(), 1.0);
    }
    let mut est = BaselineEstimate::new(BaselineMethod::Vertical, w.dot(&y0));
    est.weights = Some(w);
    est.ridge_fallback = fallback;
    Ok(est)
}

/// Four-step factor imputation from pre-period and target-period outcomes.
///
/// 1. `S_ij` averages `Y_it Y_jt` over periods `-T0..=0` when both units
///    are controls and over `-T0..-1` otherwise.
/// 2. `U` holds the top-`r` eigenvectors of `S / N`.
/// 3. `V_0` regresses control target outcomes on `U`.
/// 4. The estimate is the treated mean of `U_i' V_0`.
pub fn estimate_factor4step(data: &PanelDataset, r: usize) -> Result<BaselineEstimate> {
    let (treated, control) = require_groups(data)?;
    let n = data.n_units();
    let t0 = data.n_pre();
    if r == 0 || r > n.min(t0) || r > control.len() {
        return Err(Error::RankTooLarge {
            rank: r,
            max: n.min(t0).min(control.len()),
        });
    }
    let y0 = data.y_target();
    let u = top_second_moment_eigenvectors(data, &control, r)?;
    let uc = u.select_rows(&control);
    let v0 = least_squares(&uc, &y0.select_rows(&control), 0.0)
        .map_err(|_| Error::EigenFailure("control eigenvector block is rank deficient".into()))?;
    let fitted = &u * &v0;
    let mut est = BaselineEstimate::new(BaselineMethod::Factor4Step, mean_of(&fitted, &treated));
    est.factors = Some(FactorPieces {
        u_tilde: u,
        v0_tilde: v0,
    });
    Ok(est)
}

/// Top-`r` eigenvectors of the four-step matrix `S`.
///
/// `S = F G F'` with `F = [Y_pre, Y_pre on controls, Y_0 on controls]` and
/// diagonal `G`, so its nonzero spectrum lives in the column space of `F`.
/// A thin QR of `F` reduces the problem to one of size `2 T0 + 1`.
fn top_second_moment_eigenvectors(
    data: &PanelDataset,
    control: &[usize],
    r: usize,
) -> Result<DMatrix<f64>> {
    let n = data.n_units();
    let t0 = data.n_pre();
    let pre = data.y_pre();
    let k = 2 * t0 + 1;
    let mut f = DMatrix::zeros(n, k);
    f.columns_mut(0, t0).copy_from(pre);
    for &i in control {
        for t in 0..t0 {
            f[(i, t0 + t)] = pre[(i, t)];
        }
        f[(i, 2 * t0)] = data.y_target()[i];
    }
    let (t0f, nf) = (t0 as f64, n as f64);
    let g = DVector::from_fn(k, |j, _| {
        if j < t0 {
            1.0 / (t0f * nf)
        } else if j < 2 * t0 {
            -1.0 / (t0f * (t0f + 1.0) * nf)
        } else {
            1.0 / ((t0f + 1.0) * nf)
        }
    });
    let qr = f.qr();
    let q = qr.q();
    let rm = qr.r();
    let rg = DMatrix::from_fn(rm.nrows(), k, |i, j| rm[(i, j)] * g[j]);
    let small = SymmetricEigen::new(symmetrize(&(rg * rm.transpose())));
    if small.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::EigenFailure("non-finite eigenvalues".into()));
    }
    let mut order: Vec<usize> = (0..small.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| small.eigenvalues[b].total_cmp(&small.eigenvalues[a]));
    Ok(q * small.eigenvectors.select_columns(&order[..r]))
}

/// Limit decomposition of a regression estimator's error around the
/// sample target, conditional on the realized draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BiasOracleResult {
    pub bias: f64,
    /// Noise-driven term evaluated on the realized errors.
    pub variance_term: f64,
    /// Closed-form bound on `|bias|`; infinite when its denominator is not
    /// positive.
    pub bias_upper_bound: f64,
}

fn iid_sigma(cfg: &FactorDgpConfig) -> Result<f64> {
    match cfg.noise.dependence {
        NoiseDependence::Independent => Ok(cfg.noise.sigma),
        _ => Err(Error::InvalidConfig(
            "regression bias terms require serially independent noise".into(),
        )),
    }
}

fn column_mean(m: &DMatrix<f64>, rows: &[usize]) -> DVector<f64> {
    m.select_rows(rows).row_sum().transpose() / rows.len() as f64
}

fn solve_general(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    a.lu().solve(b).ok_or(Error::SingularSystem)
}

fn positive_ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else if den > 0.0 {
        num / den
    } else {
        f64::INFINITY
    }
}

/// Large-`N0` error of the horizontal regression with fixed `T0`.
///
/// With `S = E[U U' | A = 0]`,
/// `B = -sigma^2 V_0' (S V_pre' V_pre + sigma^2 I)^-1 U_T` and
/// `V = e_T,pre' V_pre (sigma^2 S^-1 + V_pre' V_pre)^-1 V_0 - e_T,0`.
/// Requires a configuration without covariates.
pub fn bias_oracle_horizontal(
    truth: &GroundTruth,
    cfg: &FactorDgpConfig,
) -> Result<BiasOracleResult> {
    if cfg.n_cov() != 0 {
        return Err(Error::InvalidConfig(
            "horizontal bias terms are defined for panels without covariates".into(),
        ));
    }
    let sigma = iid_sigma(cfg)?;
    let s2 = sigma * sigma;
    let r = cfg.n_factors();
    let t0 = cfg.n_pre;
    let s = factor_latent_moments(cfg)?.second_control.clone();
    let (s_min, s_max) = eig_extremes(&s);
    if s_min.is_nan() || s_min <= 1e-12 * s_max.max(1.0) {
        return Err(Error::SingularConfounderCov);
    }
    let v_pre = cfg.v_pre();
    let v0 = cfg.v_target();
    let vtv = v_pre.transpose() * &v_pre;
    let treated: Vec<usize> = (0..truth.treatment.len())
        .filter(|&i| truth.treatment[i])
        .collect();
    if treated.is_empty() {
        return Err(Error::DegenerateGroup("no treated units".into()));
    }
    let u_t = column_mean(&truth.confounders, &treated);
    let eps_t = column_mean(&truth.noise, &treated);
    let eps_pre = eps_t.rows(0, t0).into_owned();
    let eps0 = eps_t[t0];

    let a = &s * &vtv + DMatrix::identity(r, r) * s2;
    let bias = -s2 * v0.dot(&solve_general(a, &u_t)?);
    let s_inv = s
        .clone()
        .try_inverse()
        .ok_or(Error::SingularConfounderCov)?;
    let m = s_inv * s2 + &vtv;
    let variance_term = (v_pre.transpose() * eps_pre).dot(&solve_general(m, &v0)?) - eps0;
    let sv = singular_values(&v_pre)?;
    let sv_min = if sv.len() < r { 0.0 } else { sv[r - 1] };
    let bound = positive_ratio(s2, s_min * sv_min * sv_min - s2) * u_t.norm() * v0.norm();
    Ok(BiasOracleResult {
        bias,
        variance_term,
        bias_upper_bound: bound,
    })
}

/// Large-`T0` error of the vertical regression with fixed control units,
/// conditional on the realized confounders.
///
/// Covariates enter as additional factors with known values, so `U` below
/// stands for `(U; X)` and `V_t` for `(V_t; b_t)`. With
/// `Vbar = V_pre' V_pre / T0`,
/// `B = -sigma^2 V_0' (U_C' U_C Vbar + sigma^2 I)^-1 U_T` and
/// `V = e_C,0' U_C (U_C' U_C + sigma^2 Vbar^-1)^-1 U_T - e_T,0`.
pub fn bias_oracle_vertical(
    truth: &GroundTruth,
    cfg: &FactorDgpConfig,
) -> Result<BiasOracleResult> {
    let sigma = iid_sigma(cfg)?;
    let s2 = sigma * sigma;
    let t0 = cfg.n_pre;
    let design = cfg.design();
    let q = design.ncols();
    let f_pre = design.rows(0, t0).into_owned();
    let f0 = design.row(t0).transpose();
    let vbar = f_pre.transpose() * &f_pre / t0 as f64;
    let (vb_min, vb_max) = eig_extremes(&vbar);
    if vb_min.is_nan() || vb_min <= 1e-12 * vb_max.max(1.0) {
        return Err(Error::SingularVbar);
    }
    let n = truth.treatment.len();
    let zeta = DMatrix::from_fn(n, q, |i, j| {
        let r = truth.confounders.ncols();
        if j < r {
            truth.confounders[(i, j)]
        } else {
            truth.covariates[(i, j - r)]
        }
    });
    let treated: Vec<usize> = (0..n).filter(|&i| truth.treatment[i]).collect();
    let control: Vec<usize> = (0..n).filter(|&i| !truth.treatment[i]).collect();
    if treated.is_empty() || control.is_empty() {
        return Err(Error::DegenerateGroup(
            "vertical bias terms need both groups".into(),
        ));
    }
    let n0 = control.len() as f64;
    let uc = zeta.select_rows(&control);
    let u_t = column_mean(&zeta, &treated);
    let eps_c0 = truth.noise.column(t0).select_rows(&control);
    let eps_t0 = mean_of(&truth.noise.column(t0).into_owned(), &treated);

    let utu = uc.transpose() * &uc;
    let a = &utu * &vbar + DMatrix::identity(q, q) * s2;
    let bias = -s2 * f0.dot(&solve_general(a, &u_t)?);
    let vbar_inv = vbar.clone().try_inverse().ok_or(Error::SingularVbar)?;
    let m = &utu + vbar_inv * s2;
    let variance_term = (uc.transpose() * eps_c0).dot(&solve_general(m, &u_t)?) - eps_t0;
    let (g_min, _) = eig_extremes(&(&utu / n0));
    let bound = positive_ratio(s2, g_min * vb_min - s2 / n0) / n0 * f0.norm() * u_t.norm();
    Ok(BiasOracleResult {
        bias,
        variance_term,
        bias_upper_bound: bound,
    })
}
