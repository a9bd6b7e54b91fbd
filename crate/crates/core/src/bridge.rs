//! Regularized GMM estimation of the minimum-norm outcome bridge.
//!
//! The bridge `h(W) = theta_1' Y_pre + theta_2' X` satisfies the control
//! moment `E[(1-A)(Y_0 - h(W)) Z] = 0` with instruments `Z = (Y_post; X)`.
//! In sample form this reads `b = K theta`, where
//! `K = E_n[(1-A) Z W']` and `b = E_n[(1-A) Z Y_0]`. `K` is typically rank
//! deficient, so the estimator solves the ridge-penalized problem
//!
//! ```text
//! theta = argmin (b - K theta)' Omega (b - K theta) + lambda |theta|^2
//!       = (K' Omega K + lambda I)^-1 K' Omega b
//! ```
//!
//! which converges to the minimum-norm bridge when `lambda -> 0` slower
//! than `1/n`. The treated-mean counterfactual is the treated average of
//! `h(W)`; inference uses the plug-in influence function.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{
    eig_extremes, normal_quantile, penalized_solve, rank_estimate, singular_values, spd_inverse,
    spd_solve, symmetrize,
};
use crate::panel::PanelDataset;

/// Sample moment system of a panel.
#[derive(Debug, Clone)]
pub struct MomentSystem {
    /// `E_n[(1-A) Z W']`, (T1 + d) x (T0 + d).
    pub k_hat: DMatrix<f64>,
    /// `E_n[(1-A) Z Y_0]`.
    pub b_hat: DVector<f64>,
    /// Treated-unit average of `W`.
    pub treated_w_mean: DVector<f64>,
    /// Average of `W` over all units.
    pub all_w_mean: DVector<f64>,
    /// Share of treated units.
    pub p_treated: f64,
    pub n_units: usize,
    pub n_pre: usize,
}

pub fn build_moment_system(data: &PanelDataset) -> Result<MomentSystem> {
    let (treated, control) = data.group_indices();
    if treated.is_empty() {
        return Err(Error::DegenerateGroup("no treated units".into()));
    }
    if control.is_empty() {
        return Err(Error::DegenerateGroup("no control units".into()));
    }
    let n = data.n_units() as f64;
    let z = data.z_matrix();
    let w = data.w_matrix();
    let zc = z.select_rows(&control);
    let wc = w.select_rows(&control);
    let yc = data.y_target().select_rows(&control);
    let treated_sum = w.select_rows(&treated).row_sum().transpose();
    Ok(MomentSystem {
        k_hat: zc.transpose() * wc / n,
        b_hat: zc.transpose() * yc / n,
        treated_w_mean: treated_sum / treated.len() as f64,
        all_w_mean: w.row_sum().transpose() / n,
        p_treated: treated.len() as f64 / n,
        n_units: data.n_units(),
        n_pre: data.n_pre(),
    })
}

/// Regularization rule `lambda = c * n^(-beta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct LambdaRule {
    pub c: f64,
    pub beta: f64,
}

impl Default for LambdaRule {
    fn default() -> Self {
        Self { c: 1.0, beta: 0.75 }
    }
}

impl LambdaRule {
    pub fn value(&self, n: usize) -> Result<f64> {
        default_lambda(n, self.c, self.beta)
    }
}

/// `c * n^(-beta)`, with `beta` restricted to `(0.5, 1)`.
pub fn default_lambda(n: usize, c: f64, beta: f64) -> Result<f64> {
    if !(beta > 0.5 && beta < 1.0) {
        return Err(Error::ExponentOutOfWindow(beta));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidLambda(c));
    }
    if n == 0 {
        return Err(Error::Domain("sample size must be positive".into()));
    }
    Ok(c * (n as f64).powf(-beta))
}

#[derive(Debug, Clone)]
pub struct BridgeCoefficients {
    /// `(theta_1; theta_2)`, length T0 + d.
    pub theta: DVector<f64>,
    pub lambda: f64,
    /// GMM weight on the control moments.
    pub weight: DMatrix<f64>,
    pub n_pre: usize,
}

impl BridgeCoefficients {
    pub fn theta1(&self) -> DVector<f64> {
        self.theta.rows(0, self.n_pre).into_owned()
    }
    pub fn theta2(&self) -> DVector<f64> {
        self.theta
            .rows(self.n_pre, self.theta.len() - self.n_pre)
            .into_owned()
    }
}

/// Weighting of the control moments.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightSpec {
    Identity,
    /// A fixed symmetric positive definite matrix.
    Fixed(DMatrix<f64>),
    /// Identity-weighted first stage, then the inverse of the estimated
    /// moment covariance. `jitter` is added to the diagonal when the
    /// covariance is near singular; `None` uses `1e-8 * trace / dim`.
    OptimalTwoStage {
        jitter: Option<f64>,
    },
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidLambda(lambda))
    }
}

fn fit_penalized(
    ms: &MomentSystem,
    weight: &DMatrix<f64>,
    lambda: f64,
    penalty: &DMatrix<f64>,
) -> Result<BridgeCoefficients> {
    check_lambda(lambda)?;
    let m = ms.k_hat.nrows();
    if weight.shape() != (m, m) {
        return Err(Error::DimensionMismatch(format!(
            "weight must be {m} x {m}, got {:?}",
            weight.shape()
        )));
    }
    let theta = penalized_solve(&ms.k_hat, weight, &ms.b_hat, lambda, penalty)?;
    Ok(BridgeCoefficients {
        theta,
        lambda,
        weight: weight.clone(),
        n_pre: ms.n_pre,
    })
}

/// `(K' Omega K + lambda I)^-1 K' Omega b`.
pub fn fit_bridge(
    ms: &MomentSystem,
    weight: &DMatrix<f64>,
    lambda: f64,
) -> Result<BridgeCoefficients> {
    let p = ms.k_hat.ncols();
    fit_penalized(ms, weight, lambda, &DMatrix::identity(p, p))
}

/// `(K' Omega K + lambda M)^-1 K' Omega b` for a PSD penalty `M`.
pub fn fit_bridge_weighted_m(
    ms: &MomentSystem,
    weight: &DMatrix<f64>,
    lambda: f64,
    penalty: &DMatrix<f64>,
) -> Result<BridgeCoefficients> {
    fit_penalized(ms, weight, lambda, penalty).map_err(|e| match e {
        Error::SingularSystem => Error::SingularPenalizedSystem,
        other => other,
    })
}

pub fn estimate_treated_mean(ms: &MomentSystem, coef: &BridgeCoefficients) -> f64 {
    ms.treated_w_mean.dot(&coef.theta)
}

/// N x (T1 + d) matrix whose row `i` is `(1-A_i)(Y_0i - W_i' theta) Z_i'`.
pub fn moment_matrix(data: &PanelDataset, theta: &DVector<f64>) -> DMatrix<f64> {
    let resid = data.y_target() - data.w_matrix() * theta;
    let mut z = data.z_matrix();
    for (i, &a) in data.treatment().iter().enumerate() {
        let scale = if a { 0.0 } else { resid[i] };
        z.row_mut(i).scale_mut(scale);
    }
    z
}

/// `E_n[m m']` at `theta`.
pub fn sample_moment_covariance(data: &PanelDataset, theta: &DVector<f64>) -> DMatrix<f64> {
    let m = moment_matrix(data, theta);
    symmetrize(&(m.transpose() * &m / data.n_units() as f64))
}

/// Inverse of a symmetrized covariance, regularized when its smallest
/// eigenvalue falls below `1e-8 * trace / dim`.
pub fn optimal_weight(sigma: &DMatrix<f64>, jitter: Option<f64>) -> Result<DMatrix<f64>> {
    let s = symmetrize(sigma);
    let dim = s.nrows();
    let floor = 1e-8 * s.trace() / dim as f64;
    let (lo, _) = eig_extremes(&s);
    let s = if lo < floor {
        let j = jitter.unwrap_or(floor);
        s + DMatrix::identity(dim, dim) * j
    } else {
        s
    };
    spd_inverse(&s).map_err(|_| Error::NonPositiveDefiniteWeight)
}

#[derive(Debug, Clone)]
pub struct TwoStageFit {
    pub first: BridgeCoefficients,
    pub second: BridgeCoefficients,
    /// Moment covariance at the first-stage coefficients.
    pub sigma_m: DMatrix<f64>,
}

pub fn fit_two_stage(
    data: &PanelDataset,
    ms: &MomentSystem,
    lambda: f64,
    jitter: Option<f64>,
) -> Result<TwoStageFit> {
    let m = ms.k_hat.nrows();
    let first = fit_bridge(ms, &DMatrix::identity(m, m), lambda)?;
    let sigma_m = sample_moment_covariance(data, &first.theta);
    let weight = optimal_weight(&sigma_m, jitter)?;
    let second = fit_bridge(ms, &weight, lambda)?;
    Ok(TwoStageFit {
        first,
        second,
        sigma_m,
    })
}

/// Influence values of the treated-mean estimator and their parts.
#[derive(Debug, Clone)]
pub struct InfluenceParts {
    /// `A (W' theta - gamma)`.
    pub g: DVector<f64>,
    /// `Psi m`, the first-stage correction.
    pub psi_m: DVector<f64>,
    /// `-(g + Psi m) / E_n[A]`.
    pub psi: DVector<f64>,
}

/// Plug-in influence function with
/// `Psi = E_n[A W'] (K' Omega K + lambda I)^-1 K' Omega`.
pub fn influence_values(
    data: &PanelDataset,
    ms: &MomentSystem,
    coef: &BridgeCoefficients,
    gamma: f64,
) -> Result<InfluenceParts> {
    let p = ms.k_hat.ncols();
    let m = ms.k_hat.nrows();
    if coef.theta.len() != p || coef.weight.shape() != (m, m) || data.n_units() != ms.n_units {
        return Err(Error::DimensionMismatch(
            "coefficients, weight and data do not match the moment system".into(),
        ));
    }
    let ktw = ms.k_hat.transpose() * &coef.weight;
    let bread = &ktw * &ms.k_hat + DMatrix::identity(p, p) * coef.lambda;
    let tbar = DMatrix::from_column_slice(p, 1, ms.treated_w_mean.as_slice());
    let h = spd_solve(&bread, &tbar)?;
    let psi_row = (h.transpose() * ktw) * ms.p_treated;

    let fitted = data.w_matrix() * &coef.theta;
    let mom = moment_matrix(data, &coef.theta);
    let n = data.n_units();
    let g = DVector::from_fn(n, |i, _| {
        if data.treatment()[i] {
            fitted[i] - gamma
        } else {
            0.0
        }
    });
    let psi_m = (&mom * psi_row.transpose()).column(0).into_owned();
    let psi = (&g + &psi_m) / (-ms.p_treated);
    Ok(InfluenceParts { g, psi_m, psi })
}

/// Uncentered variance `E_n[psi^2]` and the Wald interval at level
/// `1 - rho`.
pub fn variance_and_ci(psi: &DVector<f64>, gamma: f64, rho: f64) -> Result<(f64, (f64, f64))> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Domain(format!(
            "significance level {rho} not in (0, 1)"
        )));
    }
    let n = psi.len();
    if n == 0 {
        return Err(Error::Domain("no influence values".into()));
    }
    let sigma2 = psi.norm_squared() / n as f64;
    let half = normal_quantile(1.0 - rho / 2.0)? * (sigma2 / n as f64).sqrt();
    Ok((sigma2, (gamma - half, gamma + half)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    /// `|b - K theta|`.
    pub moment_residual_norm: f64,
    pub k_singular_values: Vec<f64>,
    pub effective_rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimand {
    /// `E[Y_0(0) | A = 1]`.
    TreatedMean,
    /// `E[Y_0(0)]`.
    PopulationMean,
}

#[derive(Debug, Clone)]
pub struct EstimateResult {
    pub estimand: Estimand,
    pub gamma_hat: f64,
    pub theta: DVector<f64>,
    pub n_pre: usize,
    pub sigma2_hat: f64,
    pub ci: (f64, f64),
    pub lambda: f64,
    pub weight: DMatrix<f64>,
    pub diagnostics: Diagnostics,
}

#[derive(Serialize)]
struct EstimateJson<'a> {
    gamma_hat: f64,
    theta1: Vec<f64>,
    theta2: Vec<f64>,
    sigma2_hat: f64,
    ci: [f64; 2],
    lambda: f64,
    diagnostics: &'a Diagnostics,
}

impl EstimateResult {
    pub fn theta1(&self) -> DVector<f64> {
        self.theta.rows(0, self.n_pre).into_owned()
    }
    pub fn theta2(&self) -> DVector<f64> {
        self.theta
            .rows(self.n_pre, self.theta.len() - self.n_pre)
            .into_owned()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(EstimateJson {
            gamma_hat: self.gamma_hat,
            theta1: self.theta1().iter().copied().collect(),
            theta2: self.theta2().iter().copied().collect(),
            sigma2_hat: self.sigma2_hat,
            ci: [self.ci.0, self.ci.1],
            lambda: self.lambda,
            diagnostics: &self.diagnostics,
        })
        .expect("estimate serializes")
    }
}

fn diagnostics(ms: &MomentSystem, theta: &DVector<f64>) -> Result<Diagnostics> {
    Ok(Diagnostics {
        moment_residual_norm: (&ms.b_hat - &ms.k_hat * theta).norm(),
        k_singular_values: singular_values(&ms.k_hat)?.iter().copied().collect(),
        effective_rank: rank_estimate(&ms.k_hat, None)?,
    })
}

fn resolve_weight(
    data: &PanelDataset,
    ms: &MomentSystem,
    spec: &WeightSpec,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    let m = ms.k_hat.nrows();
    match spec {
        WeightSpec::Identity => Ok(DMatrix::identity(m, m)),
        WeightSpec::Fixed(w) => Ok(w.clone()),
        WeightSpec::OptimalTwoStage { jitter } => {
            let first = fit_bridge(ms, &DMatrix::identity(m, m), lambda)?;
            optimal_weight(&sample_moment_covariance(data, &first.theta), *jitter)
        }
    }
}

/// Treated-mean estimate with influence-function inference.
pub fn estimate_bridge(
    data: &PanelDataset,
    weight: &WeightSpec,
    lambda: f64,
    rho: f64,
) -> Result<EstimateResult> {
    check_lambda(lambda)?;
    let ms = build_moment_system(data)?;
    let w = resolve_weight(data, &ms, weight, lambda)?;
    let coef = fit_bridge(&ms, &w, lambda)?;
    let gamma = estimate_treated_mean(&ms, &coef);
    let parts = influence_values(data, &ms, &coef, gamma)?;
    let (sigma2, ci) = variance_and_ci(&parts.psi, gamma, rho)?;
    Ok(EstimateResult {
        estimand: Estimand::TreatedMean,
        gamma_hat: gamma,
        diagnostics: diagnostics(&ms, &coef.theta)?,
        theta: coef.theta,
        n_pre: ms.n_pre,
        sigma2_hat: sigma2,
        ci,
        lambda,
        weight: w,
    })
}

/// Two-stage optimally weighted treated-mean estimate.
pub fn estimate_two_stage(
    data: &PanelDataset,
    lambda: f64,
    jitter: Option<f64>,
    rho: f64,
) -> Result<EstimateResult> {
    estimate_bridge(data, &WeightSpec::OptimalTwoStage { jitter }, lambda, rho)
}

/// Whole-population mean `E[Y_0(0)]`.
///
/// The joint weight covers the control moments and the mean equation,
/// `[[W11, W12], [W21, W22]]` of size T1 + d + 1. The bridge is fitted with
/// weight `W11^-1`; the mean is then corrected by `W21 W11^-1 E_n[m]`,
/// which uses the control moments to reduce variance. The optimal choice
/// sets `W11 = Sigma_m` and `W21 = Sigma_gm` from an identity-weighted
/// initial fit.
pub fn estimate_population_mean(
    data: &PanelDataset,
    weight: &WeightSpec,
    lambda: f64,
    rho: f64,
) -> Result<EstimateResult> {
    check_lambda(lambda)?;
    let ms = build_moment_system(data)?;
    let m = ms.k_hat.nrows();
    let p = ms.k_hat.ncols();
    let n = data.n_units() as f64;
    let (w11, w21) = match weight {
        WeightSpec::Identity => (DMatrix::identity(m, m), DMatrix::zeros(1, m)),
        WeightSpec::Fixed(w) => {
            if w.shape() != (m + 1, m + 1) {
                return Err(Error::DimensionMismatch(format!(
                    "joint weight must be {} x {}, got {:?}",
                    m + 1,
                    m + 1,
                    w.shape()
                )));
            }
            (
                w.view((0, 0), (m, m)).into_owned(),
                w.view((m, 0), (1, m)).into_owned(),
            )
        }
        WeightSpec::OptimalTwoStage { jitter } => {
            let init = fit_bridge(&ms, &DMatrix::identity(m, m), lambda)?;
            let fitted = data.w_matrix() * &init.theta;
            let gamma0 = fitted.mean();
            let mom = moment_matrix(data, &init.theta);
            let g = fitted.add_scalar(-gamma0);
            let sigma_gm = g.transpose() * &mom / n;
            let sigma_m = symmetrize(&(mom.transpose() * &mom / n));
            let w11_inv = optimal_weight(&sigma_m, *jitter)?;
            let w11 = spd_inverse(&w11_inv)?;
            (w11, DMatrix::from_row_slice(1, m, sigma_gm.as_slice()))
        }
    };
    let w11_inv = spd_inverse(&w11).map_err(|_| Error::NonPositiveDefiniteWeight)?;
    let coef = fit_bridge(&ms, &w11_inv, lambda)?;
    let correction = &w21 * &w11_inv;
    let mbar = &ms.b_hat - &ms.k_hat * &coef.theta;
    let gamma = ms.all_w_mean.dot(&coef.theta) - (&correction * &mbar)[0];

    let ktw = ms.k_hat.transpose() * &w11_inv;
    let bread = &ktw * &ms.k_hat + DMatrix::identity(p, p) * lambda;
    let lead = DMatrix::from_column_slice(p, 1, ms.all_w_mean.as_slice())
        + (&correction * &ms.k_hat).transpose();
    let h = spd_solve(&bread, &lead)?;
    let psi_row = h.transpose() * ktw - &correction;
    let fitted = data.w_matrix() * &coef.theta;
    let mom = moment_matrix(data, &coef.theta);
    let psi = fitted.add_scalar(-gamma) + (&mom * psi_row.transpose()).column(0);
    let (sigma2, ci) = variance_and_ci(&psi, gamma, rho)?;
    Ok(EstimateResult {
        estimand: Estimand::PopulationMean,
        gamma_hat: gamma,
        diagnostics: diagnostics(&ms, &coef.theta)?,
        theta: coef.theta,
        n_pre: ms.n_pre,
        sigma2_hat: sigma2,
        ci,
        lambda,
        weight: w11_inv,
    })
}
