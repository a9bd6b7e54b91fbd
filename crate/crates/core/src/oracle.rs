//! Population quantities for checking the estimators.
//!
//! Everything here is computed from a configuration, never from data:
//! population moment matrices, the affine set of bridge functions, its
//! minimum-norm and penalty-targeted members, identification diagnostics,
//! the rank structure under autoregressive confounders, and the
//! asymptotic variance of the treated-mean estimator.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::bridge::MomentSystem;
use crate::dgp::{
    ar_latent_moments, factor_latent_moments, ArDgpConfig, FactorDgpConfig, LatentMoments,
};
use crate::error::{Error, Result};
use crate::numerics::{pinv, rank_estimate, singular_values, svd_full};

/// Population counterparts of the sample moment system.
#[derive(Debug, Clone)]
pub struct PopulationMoments {
    /// `E[(1-A) Z W']`, (T1 + d) x (T0 + d).
    pub k: DMatrix<f64>,
    /// `E[(1-A) Z Y_0]`.
    pub b: DVector<f64>,
    /// `E[W | A = 1]`.
    pub treated_w_mean: DVector<f64>,
    /// `E[W]`.
    pub all_w_mean: DVector<f64>,
    /// Second moment of the latent vector among controls.
    pub second_moment_block: DMatrix<f64>,
    pub p_control: f64,
    pub p_treated: f64,
    /// `E[Y_0(0) | A = 1]`.
    pub gamma_target: f64,
    pub n_pre: usize,
}

impl PopulationMoments {
    /// The population system in the form consumed by the sample
    /// estimators.
    pub fn moment_system(&self) -> MomentSystem {
        MomentSystem {
            k_hat: self.k.clone(),
            b_hat: self.b.clone(),
            treated_w_mean: self.treated_w_mean.clone(),
            all_w_mean: self.all_w_mean.clone(),
            p_treated: self.p_treated,
            n_units: 0,
            n_pre: self.n_pre,
        }
    }
}

/// Linear map from the latent vector to instrument, regressor and target.
struct Structure {
    g_pre: DMatrix<f64>,
    g_post: DMatrix<f64>,
    f0: DVector<f64>,
    noise_cov: DMatrix<f64>,
    n_pre: usize,
    latent: Arc<LatentMoments>,
}

impl Structure {
    fn new(
        design: &DMatrix<f64>,
        n_pre: usize,
        n_post: usize,
        d: usize,
        noise_cov: DMatrix<f64>,
        latent: Arc<LatentMoments>,
    ) -> Self {
        let q = design.ncols();
        let stack = |rows: DMatrix<f64>| {
            let m = rows.nrows();
            let mut g = DMatrix::zeros(m + d, q);
            g.rows_mut(0, m).copy_from(&rows);
            for j in 0..d {
                g[(m + j, q - d + j)] = 1.0;
            }
            g
        };
        Self {
            g_pre: stack(design.rows(0, n_pre).into_owned()),
            g_post: stack(design.rows(n_pre + 1, n_post).into_owned()),
            f0: design.row(n_pre).transpose(),
            noise_cov,
            n_pre,
            latent,
        }
    }

    fn factor(cfg: &FactorDgpConfig) -> Result<Self> {
        let latent = factor_latent_moments(cfg)?;
        Ok(Self::new(
            &cfg.design(),
            cfg.n_pre,
            cfg.n_post,
            cfg.n_cov(),
            cfg.noise.covariance(cfg.n_pre, cfg.n_post),
            latent,
        ))
    }

    fn ar(cfg: &ArDgpConfig) -> Result<Self> {
        let latent = ar_latent_moments(cfg)?;
        Ok(Self::new(
            &cfg.design(),
            cfg.n_pre,
            cfg.n_post,
            cfg.n_cov(),
            cfg.noise.covariance(cfg.n_pre, cfg.n_post),
            latent,
        ))
    }

    fn moments(&self) -> PopulationMoments {
        let lm = &self.latent;
        let p0 = lm.p_control();
        let s0 = &lm.second_control;
        let post_s0 = &self.g_post * s0;
        PopulationMoments {
            k: &post_s0 * self.g_pre.transpose() * p0,
            b: &post_s0 * &self.f0 * p0,
            treated_w_mean: &self.g_pre * &lm.mean_treated,
            all_w_mean: &self.g_pre * &lm.mean_all,
            second_moment_block: s0.clone(),
            p_control: p0,
            p_treated: lm.p_treated,
            gamma_target: self.f0.dot(&lm.mean_treated),
            n_pre: self.n_pre,
        }
    }
}

/// Population moments for a static factor configuration.
pub fn population_k_b(cfg: &FactorDgpConfig) -> Result<PopulationMoments> {
    Ok(Structure::factor(cfg)?.moments())
}

/// Population moments for an autoregressive configuration.
pub fn population_k_b_ar(cfg: &ArDgpConfig) -> Result<PopulationMoments> {
    Ok(Structure::ar(cfg)?.moments())
}

/// The affine set of bridge coefficients `particular + directions * c`.
#[derive(Debug, Clone)]
pub struct BridgeSet {
    pub particular: DVector<f64>,
    /// (T0 + d) x (T0 - r); columns are `(n; -B_pre' n)` for `n` spanning
    /// the null space of the pre-period loadings.
    pub directions: DMatrix<f64>,
    /// Constraint matrix `[V_pre' 0; B_pre' I]`.
    pub constraint: DMatrix<f64>,
    /// Right-hand side `(V_0; b_0)`.
    pub rhs: DVector<f64>,
}

impl BridgeSet {
    pub fn dim(&self) -> usize {
        self.directions.ncols()
    }

    pub fn element(&self, coords: &DVector<f64>) -> DVector<f64> {
        &self.particular + &self.directions * coords
    }

    /// Norm of the constraint violation.
    pub fn residual(&self, theta: &DVector<f64>) -> f64 {
        (&self.constraint * theta - &self.rhs).norm()
    }

    /// Element of smallest Euclidean norm, by projection.
    pub fn min_norm_element(&self) -> Result<DVector<f64>> {
        if self.dim() == 0 {
            return Ok(self.particular.clone());
        }
        let d = &self.directions;
        let proj = d * pinv(&(d.transpose() * d), None)? * d.transpose();
        Ok(&self.particular - proj * &self.particular)
    }
}

/// Explicit description of the bridge set.
pub fn bridge_set(cfg: &FactorDgpConfig) -> Result<BridgeSet> {
    cfg.validate()?;
    let (t0, r, d) = (cfg.n_pre, cfg.n_factors(), cfg.n_cov());
    let vpt = cfg.v_pre().transpose();
    let rank = rank_estimate(&vpt, None)?;
    if rank < r {
        return Err(Error::RankDeficientLoadings { rank, expected: r });
    }
    let b_pre = cfg.b_pre();
    let theta1 = pinv(&vpt, None)? * cfg.v_target();
    let theta2 = cfg.b_target() - b_pre.transpose() * &theta1;
    let mut particular = DVector::zeros(t0 + d);
    particular.rows_mut(0, t0).copy_from(&theta1);
    particular.rows_mut(t0, d).copy_from(&theta2);

    let svd = svd_full(&vpt)?;
    let null = svd.vt.rows(r, t0 - r).transpose();
    let mut directions = DMatrix::zeros(t0 + d, t0 - r);
    directions.rows_mut(0, t0).copy_from(&null);
    directions
        .rows_mut(t0, d)
        .copy_from(&(-b_pre.transpose() * &null));

    let mut constraint = DMatrix::zeros(r + d, t0 + d);
    constraint.view_mut((0, 0), (r, t0)).copy_from(&vpt);
    constraint
        .view_mut((r, 0), (d, t0))
        .copy_from(&b_pre.transpose());
    constraint.view_mut((r, t0), (d, d)).fill_with_identity();
    let mut rhs = DVector::zeros(r + d);
    rhs.rows_mut(0, r).copy_from(&cfg.v_target());
    rhs.rows_mut(r, d).copy_from(&cfg.b_target());
    Ok(BridgeSet {
        particular,
        directions,
        constraint,
        rhs,
    })
}

/// Minimum-norm bridge `K^+ b`.
pub fn theta_min_oracle(pm: &PopulationMoments) -> Result<DVector<f64>> {
    Ok(pinv(&pm.k, None)? * &pm.b)
}

/// Bridge minimizing `theta' M theta`, via the KKT system.
pub fn theta_m_oracle(cfg: &FactorDgpConfig, m: &DMatrix<f64>) -> Result<DVector<f64>> {
    let set = bridge_set(cfg)?;
    let p = set.particular.len();
    if m.shape() != (p, p) {
        return Err(Error::DimensionMismatch(format!(
            "penalty must be {p} x {p}, got {:?}",
            m.shape()
        )));
    }
    if (m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) {
        return Err(Error::Domain("penalty matrix is not symmetric".into()));
    }
    let k = set.dim();
    if k > 0 {
        let restricted = set.directions.transpose() * m * &set.directions;
        if rank_estimate(&restricted, Some(1e-10))? < k {
            return Err(Error::TargetNotUnique);
        }
    }
    let c = &set.constraint;
    let nc = c.nrows();
    let mut kkt = DMatrix::zeros(p + nc, p + nc);
    kkt.view_mut((0, 0), (p, p)).copy_from(&(m * 2.0));
    kkt.view_mut((0, p), (p, nc)).copy_from(&c.transpose());
    kkt.view_mut((p, 0), (nc, p)).copy_from(c);
    let mut rhs = DVector::zeros(p + nc);
    rhs.rows_mut(p, nc).copy_from(&set.rhs);
    let sol = kkt.lu().solve(&rhs).ok_or(Error::TargetNotUnique)?;
    Ok(sol.rows(0, p).into_owned())
}

/// Identification diagnostics with singular-value margins.
#[derive(Debug, Clone, Serialize)]
pub struct IdentificationReport {
    pub n_factors: usize,
    pub loadings_rank: usize,
    /// Dimension of the bridge set, `T0 - r` when loadings have full rank.
    pub bridge_set_dim: usize,
    /// Control-group second moment of `(U, X)` has full rank.
    pub cond1_full_rank: bool,
    /// Smallest over largest singular value of that second moment.
    pub cond1_margin: f64,
    /// `[V_post B_post; 0 I]` has full column rank.
    pub cond2_full_column_rank: bool,
    pub cond2_margin: f64,
    pub identified: bool,
}

fn margin(a: &DMatrix<f64>) -> Result<f64> {
    let s = singular_values(a)?;
    let need = a.ncols().min(a.nrows());
    if a.nrows() < a.ncols() || s.is_empty() || s[0] == 0.0 {
        return Ok(0.0);
    }
    Ok(s[need - 1] / s[0])
}

pub fn identification_check(cfg: &FactorDgpConfig) -> Result<IdentificationReport> {
    cfg.validate()?;
    let (r, d) = (cfg.n_factors(), cfg.n_cov());
    let lm = factor_latent_moments(cfg)?;
    let loadings_rank = rank_estimate(&cfg.v_pre(), None)?;
    let cond1_rank = rank_estimate(&lm.second_control, Some(1e-10))?;
    let mut post = DMatrix::zeros(cfg.n_post + d, r + d);
    post.view_mut((0, 0), (cfg.n_post, r))
        .copy_from(&cfg.v_post());
    post.view_mut((0, r), (cfg.n_post, d))
        .copy_from(&cfg.b_post());
    post.view_mut((cfg.n_post, r), (d, d)).fill_with_identity();
    let cond2_rank = rank_estimate(&post, Some(1e-10))?;
    let cond1 = cond1_rank == r + d;
    let cond2 = cond2_rank == r + d;
    Ok(IdentificationReport {
        n_factors: r,
        loadings_rank,
        bridge_set_dim: cfg.n_pre.saturating_sub(loadings_rank),
        cond1_full_rank: cond1,
        cond1_margin: margin(&lm.second_control)?,
        cond2_full_column_rank: cond2,
        cond2_margin: margin(&post)?,
        identified: cond1 && cond2 && loadings_rank == r,
    })
}

/// Partitioned inverse of the control second moment of `(U_0, X)`.
#[derive(Debug, Clone)]
pub struct GBlocks {
    pub g11: DMatrix<f64>,
    pub g12: DMatrix<f64>,
    pub g21: DMatrix<f64>,
    pub g22: DMatrix<f64>,
}

impl GBlocks {
    pub fn assemble(&self) -> DMatrix<f64> {
        let (r, d) = (self.g11.nrows(), self.g22.nrows());
        let mut g = DMatrix::zeros(r + d, r + d);
        g.view_mut((0, 0), (r, r)).copy_from(&self.g11);
        g.view_mut((0, r), (r, d)).copy_from(&self.g12);
        g.view_mut((r, 0), (d, r)).copy_from(&self.g21);
        g.view_mut((r, r), (d, d)).copy_from(&self.g22);
        g
    }
}

/// Rank structure of a model with autoregressive confounders.
#[derive(Debug, Clone)]
pub struct TvStructure {
    /// T0 x r; row for pre period `t` is `V_t'` times the linear
    /// coefficient of `U_t` on `U_0`.
    pub rank_matrix: DMatrix<f64>,
    /// T1 x r; row for post period `t` is `V_t' Gamma_{t-1} ... Gamma_0`.
    pub v_post_tilde: DMatrix<f64>,
    pub g_blocks: Option<GBlocks>,
    pub rank_matrix_rank: usize,
    /// Column rank of `[V_post_tilde B_post; 0 I]`.
    pub post_rank: usize,
    pub identified: bool,
}

/// `Gamma_hi * ... * Gamma_lo` over period indices (0 is `-T0`), identity
/// when `hi < lo`.
pub fn gamma_product(cfg: &ArDgpConfig, hi: isize, lo: isize) -> DMatrix<f64> {
    let r = cfg.n_factors();
    let mut out = DMatrix::identity(r, r);
    let mut s = lo;
    while s <= hi {
        out = cfg.transition(s as usize) * out;
        s += 1;
    }
    out
}

fn schur_blocks(s: &DMatrix<f64>, r: usize) -> Result<GBlocks> {
    let d = s.nrows() - r;
    let suu = s.view((0, 0), (r, r)).into_owned();
    let sux = s.view((0, r), (r, d)).into_owned();
    let sxx = s.view((r, r), (d, d)).into_owned();
    let sxx_inv = if d == 0 {
        DMatrix::zeros(0, 0)
    } else {
        sxx.clone().try_inverse().ok_or(Error::SingularSigma0)?
    };
    let schur = &suu - &sux * &sxx_inv * sux.transpose();
    if rank_estimate(&schur, Some(1e-10))? < r {
        return Err(Error::SingularSigma0);
    }
    let g11 = schur.try_inverse().ok_or(Error::SingularSigma0)?;
    let g12 = -&g11 * &sux * &sxx_inv;
    let g21 = g12.transpose();
    let g22 = &sxx_inv + &sxx_inv * sux.transpose() * &g11 * &sux * &sxx_inv;
    Ok(GBlocks { g11, g12, g21, g22 })
}

/// Rank matrices for autoregressive confounders.
///
/// The simple form uses the model covariances of `U_{-T0}` and the
/// innovations; conditional means given `U_0` are unaffected by selection
/// on `U_0`, so these give the bridge coefficients exactly. The general
/// form works with control-group second moments of `(U_0, X)` and their
/// partitioned inverse, which also covers covariates.
pub fn tv_rank_matrix(cfg: &ArDgpConfig, general: bool) -> Result<TvStructure> {
    cfg.validate()?;
    let (t0, t1, r, d) = (cfg.n_pre, cfg.n_post, cfg.n_factors(), cfg.n_cov());
    let v = &cfg.loadings;
    let mut rank_matrix = DMatrix::zeros(t0, r);
    let g_blocks = if general {
        let lm = ar_latent_moments(cfg)?;
        let t = cfg.n_periods();
        let s = &lm.second_control;
        let x0 = t * r;
        let mut idx: Vec<usize> = (t0 * r..(t0 + 1) * r).collect();
        idx.extend(x0..x0 + d);
        let s0 = s.select_rows(&idx).select_columns(&idx);
        let g = schur_blocks(&s0, r)?;
        for row in 0..t0 {
            let ut: Vec<usize> = (row * r..(row + 1) * r).collect();
            let s_uu0 = s.select_rows(&ut).select_columns(&idx[..r]);
            let s_ux = s.select_rows(&ut).select_columns(&idx[r..]);
            let coef = s_uu0 * &g.g11 + s_ux * &g.g21;
            rank_matrix.row_mut(row).copy_from(&(v.row(row) * coef));
        }
        Some(g)
    } else {
        let mut p = cfg.init_cov.clone();
        let mut vars = Vec::with_capacity(t0 + 1);
        for s in 0..=t0 {
            vars.push(p.clone());
            if s < t0 {
                let gs = cfg.transition(s);
                p = gs * &p * gs.transpose() + cfg.innovation(s);
            }
        }
        if rank_estimate(&vars[t0], Some(1e-10))? < r {
            return Err(Error::SingularSigma0);
        }
        for row in 0..t0 {
            let cov = &vars[row] * gamma_product(cfg, t0 as isize - 1, row as isize).transpose();
            rank_matrix.row_mut(row).copy_from(&(v.row(row) * cov));
        }
        None
    };
    let mut v_post_tilde = DMatrix::zeros(t1, r);
    for j in 0..t1 {
        let s = t0 + 1 + j;
        let prod = gamma_product(cfg, s as isize - 1, t0 as isize);
        v_post_tilde.row_mut(j).copy_from(&(v.row(s) * prod));
    }
    let coefs = cfg.coefs();
    let mut post = DMatrix::zeros(t1 + d, r + d);
    post.view_mut((0, 0), (t1, r)).copy_from(&v_post_tilde);
    post.view_mut((0, r), (t1, d))
        .copy_from(&coefs.rows(t0 + 1, t1));
    post.view_mut((t1, r), (d, d)).fill_with_identity();
    let rank_matrix_rank = rank_estimate(&rank_matrix, Some(1e-10))?;
    let post_rank = rank_estimate(&post, Some(1e-10))?;
    Ok(TvStructure {
        identified: rank_matrix_rank == r && post_rank == r + d,
        rank_matrix,
        v_post_tilde,
        g_blocks,
        rank_matrix_rank,
        post_rank,
    })
}

fn check_in_bridge_set(cfg: &FactorDgpConfig, theta: &DVector<f64>) -> Result<()> {
    let set = bridge_set(cfg)?;
    if theta.len() != set.particular.len() {
        return Err(Error::DimensionMismatch(format!(
            "theta has {} entries, expected {}",
            theta.len(),
            set.particular.len()
        )));
    }
    let res = set.residual(theta);
    if res > 1e-6 * (1.0 + set.rhs.norm()) {
        return Err(Error::TargetNotInBridgeSet(res));
    }
    Ok(())
}

/// Covariance of the control moment function at a bridge `theta`.
///
/// At a bridge the residual `eps_0 - theta_1' eps_pre` is independent of
/// the instruments, so the covariance factors into the residual variance
/// times the control second moment of the instruments.
pub fn moment_covariance(cfg: &FactorDgpConfig, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_in_bridge_set(cfg, theta)?;
    let st = Structure::factor(cfg)?;
    Ok(moment_covariance_inner(&st, theta, cfg.n_post))
}

fn moment_covariance_inner(st: &Structure, theta: &DVector<f64>, n_post: usize) -> DMatrix<f64> {
    let t0 = st.n_pre;
    let mut v = DVector::zeros(t0 + 1);
    v.rows_mut(0, t0).copy_from(&(-theta.rows(0, t0)));
    v[t0] = 1.0;
    let s2 = (v.transpose() * st.noise_cov.view((0, 0), (t0 + 1, t0 + 1)) * &v)[0];
    let mut ezz = &st.g_post * &st.latent.second_control * st.g_post.transpose();
    let noise_post = st
        .noise_cov
        .view((t0 + 1, t0 + 1), (n_post, n_post))
        .into_owned();
    let mut block = ezz.view_mut((0, 0), (n_post, n_post));
    block += &noise_post;
    ezz * (st.latent.p_control() * s2)
}

/// Asymptotic variance of the treated-mean estimator at bridge `theta`
/// under limiting weight `weight`: the second moment of its influence
/// function.
pub fn asymptotic_variance_oracle(
    cfg: &FactorDgpConfig,
    theta: &DVector<f64>,
    weight: &DMatrix<f64>,
) -> Result<f64> {
    check_in_bridge_set(cfg, theta)?;
    let st = Structure::factor(cfg)?;
    let pm = st.moments();
    let m = pm.k.nrows();
    if weight.shape() != (m, m) {
        return Err(Error::DimensionMismatch(format!(
            "weight must be {m} x {m}"
        )));
    }
    let t0 = cfg.n_pre;
    let p1 = pm.p_treated;
    let lm = &st.latent;
    let theta1 = theta.rows(0, t0);
    let noise_pre = st.noise_cov.view((0, 0), (t0, t0));
    let var_treated = (st.f0.transpose() * lm.cov_treated() * &st.f0)[0]
        + (theta1.transpose() * noise_pre * theta1)[0];
    let eg2 = p1 * var_treated;

    let sigma_m = moment_covariance_inner(&st, theta, cfg.n_post);
    let ktw = pm.k.transpose() * weight;
    let bread = pinv(&(&ktw * &pm.k), None)?;
    let psi = (pm.treated_w_mean.transpose() * p1) * bread * ktw;
    let quad = (&psi * sigma_m * psi.transpose())[0];
    Ok((eg2 + quad) / (p1 * p1))
}
