//! Synthetic panel generators with known ground truth.
//!
//! Three generators share one engine: a static linear factor model, its
//! two-way fixed-effects special case, and a model whose confounders follow
//! a vector autoregression. Every generator is a latent vector `zeta`
//! (confounders and covariates) mapped to untreated outcomes through a
//! fixed period-by-latent design, plus idiosyncratic noise.
//!
//! Each unit draws from its own counter-based random streams, so unit `i`
//! is identical whether the panel has 100 or 100 000 units.

use std::collections::HashMap;
use std::sync::{Arc, LazyLock, Mutex};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matser;
use crate::numerics::psd_factor;
use crate::panel::PanelDataset;
use crate::rng::{unit_stream, TAG_INNOVATION, TAG_LATENT, TAG_NOISE, TAG_TREATMENT};

/// Number of draws behind plug-in population moments.
pub const PLUGIN_DRAWS: usize = 1_000_000;
const PLUGIN_SEED: u64 = 0x00C0_FFEE_5EED_0001;

/// Distribution of time-invariant covariates.
///
/// With `intercept` the first covariate is the constant 1; the remaining
/// columns are Gaussian with the given mean and covariance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    #[serde(default)]
    pub intercept: bool,
    #[serde(default)]
    pub mean: Vec<f64>,
    #[serde(default = "empty_matrix", with = "matser")]
    pub cov: DMatrix<f64>,
}

fn empty_matrix() -> DMatrix<f64> {
    DMatrix::zeros(0, 0)
}

impl CovariateSpec {
    pub fn intercept_only() -> Self {
        Self {
            intercept: true,
            ..Self::default()
        }
    }

    pub fn dim(&self) -> usize {
        usize::from(self.intercept) + self.mean.len()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseDependence {
    /// Serially independent errors.
    #[default]
    Independent,
    /// Equicorrelated errors within the block of periods `-T0..=0` and
    /// within the post block; the two blocks are independent.
    TwoBlock { corr: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    #[serde(default)]
    pub dependence: NoiseDependence,
}

impl NoiseSpec {
    pub fn iid(sigma: f64) -> Self {
        Self {
            sigma,
            dependence: NoiseDependence::Independent,
        }
    }

    /// Covariance of the error vector over periods `-T0..=T1`.
    pub fn covariance(&self, n_pre: usize, n_post: usize) -> DMatrix<f64> {
        let t = n_pre + n_post + 1;
        let s2 = self.sigma * self.sigma;
        let rho = match self.dependence {
            NoiseDependence::Independent => 0.0,
            NoiseDependence::TwoBlock { corr } => corr,
        };
        DMatrix::from_fn(t, t, |i, j| {
            if i == j {
                s2
            } else if (i <= n_pre) == (j <= n_pre) {
                s2 * rho
            } else {
                0.0
            }
        })
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise sigma {}", self.sigma)));
        }
        if let NoiseDependence::TwoBlock { corr } = self.dependence {
            if !(0.0..=1.0).contains(&corr) {
                return Err(Error::InvalidConfig(format!("block correlation {corr}")));
            }
        }
        Ok(())
    }

    fn draw(&self, rng: &mut impl Rng, n_pre: usize, out: &mut [f64]) {
        match self.dependence {
            NoiseDependence::Independent => {
                for e in out.iter_mut() {
                    *e = self.sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
            NoiseDependence::TwoBlock { corr } => {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                let (sc, si) = (corr.sqrt(), (1.0 - corr).sqrt());
                for (t, e) in out.iter_mut().enumerate() {
                    let common = if t <= n_pre { a } else { b };
                    let own: f64 = rng.sample(StandardNormal);
                    *e = self.sigma * (sc * common + si * own);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionKind {
    /// Propensity is logistic in the confounders and covariates.
    #[default]
    Logistic,
    /// Treatment is independent of everything; the propensity is the
    /// logistic transform of the intercept.
    Randomized,
}

/// Treatment assignment given latent confounders and covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionModel {
    #[serde(default)]
    pub kind: SelectionKind,
    #[serde(default)]
    pub intercept: f64,
    #[serde(default)]
    pub coef_u: Vec<f64>,
    #[serde(default)]
    pub coef_x: Vec<f64>,
    /// Propensities are kept in `[min_propensity, 1 - min_propensity]` by
    /// clipping the linear index.
    #[serde(default = "default_min_propensity")]
    pub min_propensity: f64,
}

fn default_min_propensity() -> f64 {
    0.01
}

impl SelectionModel {
    pub fn randomized(p_treated: f64) -> Self {
        Self {
            kind: SelectionKind::Randomized,
            intercept: (p_treated / (1.0 - p_treated)).ln(),
            coef_u: Vec::new(),
            coef_x: Vec::new(),
            min_propensity: default_min_propensity(),
        }
    }

    pub fn propensity(&self, u: &[f64], x: &[f64]) -> f64 {
        let mut idx = self.intercept;
        if self.kind == SelectionKind::Logistic {
            idx += self.coef_u.iter().zip(u).map(|(c, v)| c * v).sum::<f64>();
            idx += self.coef_x.iter().zip(x).map(|(c, v)| c * v).sum::<f64>();
        }
        let bound = ((1.0 - self.min_propensity) / self.min_propensity).ln();
        let idx = idx.clamp(-bound, bound);
        1.0 / (1.0 + (-idx).exp())
    }

    fn validate(&self, r: usize, d: usize) -> Result<()> {
        if !(self.min_propensity > 0.0 && self.min_propensity < 0.5) {
            return Err(Error::InvalidConfig(
                "min_propensity must lie in (0, 0.5)".into(),
            ));
        }
        if !self.coef_u.is_empty() && self.coef_u.len() != r {
            return Err(Error::InvalidConfig(format!(
                "selection coef_u has {} entries, expected {r}",
                self.coef_u.len()
            )));
        }
        if !self.coef_x.is_empty() && self.coef_x.len() != d {
            return Err(Error::InvalidConfig(format!(
                "selection coef_x has {} entries, expected {d}",
                self.coef_x.len()
            )));
        }
        Ok(())
    }
}

/// Additive effect of treatment on treated units from period 0 onwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TreatmentEffect {
    Constant(f64),
    /// One value per period `0..=T1`.
    PerPeriod(Vec<f64>),
}

impl Default for TreatmentEffect {
    fn default() -> Self {
        TreatmentEffect::Constant(0.0)
    }
}

impl TreatmentEffect {
    fn at(&self, t: usize) -> f64 {
        match self {
            TreatmentEffect::Constant(v) => *v,
            TreatmentEffect::PerPeriod(v) => v[t],
        }
    }

    fn validate(&self, n_post: usize) -> Result<()> {
        match self {
            TreatmentEffect::PerPeriod(v) if v.len() != n_post + 1 => {
                Err(Error::InvalidConfig(format!(
                    "per-period effect needs {} values, got {}",
                    n_post + 1,
                    v.len()
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Static linear factor model
/// `Y_it(0) = V_t' U_i + b_t' X_i + eps_it`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorDgpConfig {
    pub n_units: usize,
    pub n_pre: usize,
    pub n_post: usize,
    /// Factor loadings, one row per period `-T0..=T1`.
    #[serde(with = "matser")]
    pub loadings: DMatrix<f64>,
    /// Covariate coefficients, one row per period. May be empty when there
    /// are no covariates.
    #[serde(default = "empty_matrix", with = "matser")]
    pub cov_coefs: DMatrix<f64>,
    pub confounder_mean: Vec<f64>,
    #[serde(with = "matser")]
    pub confounder_cov: DMatrix<f64>,
    #[serde(default)]
    pub covariates: CovariateSpec,
    pub noise: NoiseSpec,
    pub selection: SelectionModel,
    #[serde(default)]
    pub treatment_effect: TreatmentEffect,
}

fn coef_matrix(cov_coefs: &DMatrix<f64>, t: usize, d: usize) -> DMatrix<f64> {
    if d == 0 {
        DMatrix::zeros(t, 0)
    } else {
        cov_coefs.clone()
    }
}

impl FactorDgpConfig {
    pub fn n_factors(&self) -> usize {
        self.loadings.ncols()
    }
    pub fn n_cov(&self) -> usize {
        self.covariates.dim()
    }
    pub fn n_periods(&self) -> usize {
        self.n_pre + self.n_post + 1
    }

    /// Covariate coefficients as a T x d matrix.
    pub fn coefs(&self) -> DMatrix<f64> {
        coef_matrix(&self.cov_coefs, self.n_periods(), self.n_cov())
    }
    pub fn v_pre(&self) -> DMatrix<f64> {
        self.loadings.rows(0, self.n_pre).into_owned()
    }
    pub fn v_target(&self) -> DVector<f64> {
        self.loadings.row(self.n_pre).transpose()
    }
    pub fn v_post(&self) -> DMatrix<f64> {
        self.loadings.rows(self.n_pre + 1, self.n_post).into_owned()
    }
    pub fn b_pre(&self) -> DMatrix<f64> {
        self.coefs().rows(0, self.n_pre).into_owned()
    }
    pub fn b_target(&self) -> DVector<f64> {
        self.coefs().row(self.n_pre).transpose()
    }
    pub fn b_post(&self) -> DMatrix<f64> {
        self.coefs().rows(self.n_pre + 1, self.n_post).into_owned()
    }

    pub fn validate(&self) -> Result<()> {
        let (t, r, d) = (self.n_periods(), self.n_factors(), self.n_cov());
        if self.n_units == 0 || self.n_pre == 0 {
            return Err(Error::InvalidConfig(
                "need at least one unit and one pre period".into(),
            ));
        }
        if self.loadings.nrows() != t || r == 0 {
            return Err(Error::InvalidConfig(format!(
                "loadings must be {t} x r with r >= 1, got {:?}",
                self.loadings.shape()
            )));
        }
        if d > 0 && self.cov_coefs.shape() != (t, d) {
            return Err(Error::InvalidConfig(format!(
                "cov_coefs must be {t} x {d}, got {:?}",
                self.cov_coefs.shape()
            )));
        }
        if self.confounder_mean.len() != r || self.confounder_cov.shape() != (r, r) {
            return Err(Error::InvalidConfig(
                "confounder mean/cov do not match r".into(),
            ));
        }
        validate_covariates(&self.covariates)?;
        self.noise.validate()?;
        self.selection.validate(r, d)?;
        self.treatment_effect.validate(self.n_post)?;
        let finite = self
            .loadings
            .iter()
            .chain(self.cov_coefs.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFiniteInput);
        }
        Ok(())
    }

    /// T x (r + d) map from `zeta = (U; X)` to untreated mean outcomes.
    pub(crate) fn design(&self) -> DMatrix<f64> {
        let (r, d) = (self.n_factors(), self.n_cov());
        let mut f = DMatrix::zeros(self.n_periods(), r + d);
        f.columns_mut(0, r).copy_from(&self.loadings);
        f.columns_mut(r, d).copy_from(&self.coefs());
        f
    }
}

fn validate_covariates(c: &CovariateSpec) -> Result<()> {
    let k = c.mean.len();
    if c.cov.shape() != (k, k) {
        return Err(Error::InvalidConfig(format!(
            "covariate cov must be {k} x {k}, got {:?}",
            c.cov.shape()
        )));
    }
    Ok(())
}

/// Two-way fixed effects: one unit effect with unit loading and a time
/// effect carried by an intercept covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwfeConfig {
    pub n_units: usize,
    pub n_pre: usize,
    pub n_post: usize,
    #[serde(default)]
    pub unit_effect_mean: f64,
    pub unit_effect_var: f64,
    /// One time effect per period `-T0..=T1`.
    pub time_effects: Vec<f64>,
    pub noise: NoiseSpec,
    pub selection: SelectionModel,
    #[serde(default)]
    pub treatment_effect: TreatmentEffect,
}

impl TwfeConfig {
    pub fn to_factor(&self) -> Result<FactorDgpConfig> {
        let t = self.n_pre + self.n_post + 1;
        if self.time_effects.len() != t {
            return Err(Error::InvalidConfig(format!(
                "time_effects needs {t} values, got {}",
                self.time_effects.len()
            )));
        }
        let cfg = FactorDgpConfig {
            n_units: self.n_units,
            n_pre: self.n_pre,
            n_post: self.n_post,
            loadings: DMatrix::from_element(t, 1, 1.0),
            cov_coefs: DMatrix::from_column_slice(t, 1, &self.time_effects),
            confounder_mean: vec![self.unit_effect_mean],
            confounder_cov: DMatrix::from_element(1, 1, self.unit_effect_var),
            covariates: CovariateSpec::intercept_only(),
            noise: self.noise,
            selection: self.selection.clone(),
            treatment_effect: self.treatment_effect.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Factor model with autoregressive confounders
/// `U_t = Gamma_{t-1} U_{t-1} + eta_{t-1}`, started at `U_{-T0}`.
/// Treatment depends on `U_0` and the covariates only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArDgpConfig {
    pub n_units: usize,
    pub n_pre: usize,
    pub n_post: usize,
    #[serde(with = "matser")]
    pub loadings: DMatrix<f64>,
    #[serde(default = "empty_matrix", with = "matser")]
    pub cov_coefs: DMatrix<f64>,
    #[serde(default)]
    pub covariates: CovariateSpec,
    pub noise: NoiseSpec,
    pub selection: SelectionModel,
    #[serde(default)]
    pub treatment_effect: TreatmentEffect,
    /// `Gamma_t` for `t = -T0..T1-1`; a single entry is shared by all steps.
    #[serde(with = "matser::list")]
    pub transitions: Vec<DMatrix<f64>>,
    /// Innovation covariances, indexed like `transitions`.
    #[serde(with = "matser::list")]
    pub innovation_cov: Vec<DMatrix<f64>>,
    pub init_mean: Vec<f64>,
    #[serde(with = "matser")]
    pub init_cov: DMatrix<f64>,
    /// Gaussian innovations when true; centered exponential otherwise.
    #[serde(default = "default_true")]
    pub joint_normal: bool,
}

fn default_true() -> bool {
    true
}

impl ArDgpConfig {
    pub fn n_factors(&self) -> usize {
        self.loadings.ncols()
    }
    pub fn n_cov(&self) -> usize {
        self.covariates.dim()
    }
    pub fn n_periods(&self) -> usize {
        self.n_pre + self.n_post + 1
    }
    pub fn coefs(&self) -> DMatrix<f64> {
        coef_matrix(&self.cov_coefs, self.n_periods(), self.n_cov())
    }

    /// Transition out of period index `s` (0 is period `-T0`).
    pub fn transition(&self, s: usize) -> &DMatrix<f64> {
        if self.transitions.len() == 1 {
            &self.transitions[0]
        } else {
            &self.transitions[s]
        }
    }
    pub fn innovation(&self, s: usize) -> &DMatrix<f64> {
        if self.innovation_cov.len() == 1 {
            &self.innovation_cov[0]
        } else {
            &self.innovation_cov[s]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (t, r, d) = (self.n_periods(), self.n_factors(), self.n_cov());
        if self.n_units == 0 || self.n_pre == 0 || r == 0 {
            return Err(Error::InvalidConfig(
                "need units, a pre period and r >= 1".into(),
            ));
        }
        if self.loadings.nrows() != t {
            return Err(Error::InvalidConfig(
                "loadings must have one row per period".into(),
            ));
        }
        if d > 0 && self.cov_coefs.shape() != (t, d) {
            return Err(Error::InvalidConfig(format!("cov_coefs must be {t} x {d}")));
        }
        for (name, list) in [
            ("transitions", &self.transitions),
            ("innovation_cov", &self.innovation_cov),
        ] {
            if list.len() != 1 && list.len() != t - 1 {
                return Err(Error::InvalidConfig(format!(
                    "{name} needs 1 or {} matrices, got {}",
                    t - 1,
                    list.len()
                )));
            }
            if list.iter().any(|m| m.shape() != (r, r)) {
                return Err(Error::InvalidConfig(format!(
                    "{name} entries must be {r} x {r}"
                )));
            }
        }
        if self.init_mean.len() != r || self.init_cov.shape() != (r, r) {
            return Err(Error::InvalidConfig("init mean/cov do not match r".into()));
        }
        validate_covariates(&self.covariates)?;
        self.noise.validate()?;
        self.selection.validate(r, d)?;
        self.treatment_effect.validate(self.n_post)
    }

    /// T x (T r + d) map from `zeta = (U_{-T0}; ...; U_{T1}; X)` to
    /// untreated mean outcomes.
    pub(crate) fn design(&self) -> DMatrix<f64> {
        let (t, r, d) = (self.n_periods(), self.n_factors(), self.n_cov());
        let mut f = DMatrix::zeros(t, t * r + d);
        for s in 0..t {
            for k in 0..r {
                f[(s, s * r + k)] = self.loadings[(s, k)];
            }
        }
        f.columns_mut(t * r, d).copy_from(&self.coefs());
        f
    }
}

/// Latent-vector moments by treatment group.
#[derive(Debug, Clone)]
pub struct LatentMoments {
    pub p_treated: f64,
    pub mean_treated: DVector<f64>,
    pub second_treated: DMatrix<f64>,
    pub mean_control: DVector<f64>,
    pub second_control: DMatrix<f64>,
    pub mean_all: DVector<f64>,
    pub second_all: DMatrix<f64>,
}

impl LatentMoments {
    pub fn p_control(&self) -> f64 {
        1.0 - self.p_treated
    }
    pub fn cov_treated(&self) -> DMatrix<f64> {
        &self.second_treated - &self.mean_treated * self.mean_treated.transpose()
    }
    pub fn cov_control(&self) -> DMatrix<f64> {
        &self.second_control - &self.mean_control * self.mean_control.transpose()
    }
}

trait LatentSampler: Sync {
    fn dim(&self) -> usize;
    /// Fills `zeta` for one unit and returns its propensity score.
    fn draw(&self, seed: u64, unit: u64, zeta: &mut [f64]) -> f64;
}

const MAX_BLOCK: usize = 64;

struct GaussianBlock {
    mean: DVector<f64>,
    factor: DMatrix<f64>,
}

impl GaussianBlock {
    fn new(mean: &[f64], cov: &DMatrix<f64>) -> Result<Self> {
        if mean.len() > MAX_BLOCK {
            return Err(Error::InvalidConfig(format!(
                "Gaussian block above {MAX_BLOCK} dimensions"
            )));
        }
        Ok(Self {
            mean: DVector::from_column_slice(mean),
            factor: psd_factor(cov)?,
        })
    }

    fn fill(&self, rng: &mut impl Rng, out: &mut [f64]) {
        let k = self.mean.len();
        let mut buf = [0.0f64; MAX_BLOCK];
        let z = &mut buf[..k];
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for i in 0..k {
            let mut acc = self.mean[i];
            for j in 0..k {
                acc += self.factor[(i, j)] * z[j];
            }
            out[i] = acc;
        }
    }
}

struct FactorSampler {
    r: usize,
    intercept: bool,
    u: GaussianBlock,
    x: GaussianBlock,
    selection: SelectionModel,
}

impl FactorSampler {
    fn new(cfg: &FactorDgpConfig) -> Result<Self> {
        Ok(Self {
            r: cfg.n_factors(),
            intercept: cfg.covariates.intercept,
            u: GaussianBlock::new(&cfg.confounder_mean, &cfg.confounder_cov)?,
            x: GaussianBlock::new(&cfg.covariates.mean, &cfg.covariates.cov)?,
            selection: cfg.selection.clone(),
        })
    }
}

impl LatentSampler for FactorSampler {
    fn dim(&self) -> usize {
        self.r + usize::from(self.intercept) + self.x.mean.len()
    }

    fn draw(&self, seed: u64, unit: u64, zeta: &mut [f64]) -> f64 {
        let mut rng = unit_stream(seed, unit, TAG_LATENT);
        let r = self.r;
        self.u.fill(&mut rng, &mut zeta[..r]);
        let mut off = r;
        if self.intercept {
            zeta[off] = 1.0;
            off += 1;
        }
        self.x.fill(&mut rng, &mut zeta[off..]);
        self.selection.propensity(&zeta[..r], &zeta[r..])
    }
}

struct ArSampler {
    r: usize,
    t: usize,
    n_pre: usize,
    intercept: bool,
    init: GaussianBlock,
    x: GaussianBlock,
    transitions: Vec<DMatrix<f64>>,
    innovations: Vec<DMatrix<f64>>,
    joint_normal: bool,
    selection: SelectionModel,
}

impl ArSampler {
    fn new(cfg: &ArDgpConfig) -> Result<Self> {
        let t = cfg.n_periods();
        Ok(Self {
            r: cfg.n_factors(),
            t,
            n_pre: cfg.n_pre,
            intercept: cfg.covariates.intercept,
            init: GaussianBlock::new(&cfg.init_mean, &cfg.init_cov)?,
            x: GaussianBlock::new(&cfg.covariates.mean, &cfg.covariates.cov)?,
            transitions: (0..t - 1).map(|s| cfg.transition(s).clone()).collect(),
            innovations: (0..t - 1)
                .map(|s| psd_factor(cfg.innovation(s)))
                .collect::<Result<_>>()?,
            joint_normal: cfg.joint_normal,
            selection: cfg.selection.clone(),
        })
    }
}

impl LatentSampler for ArSampler {
    fn dim(&self) -> usize {
        self.t * self.r + usize::from(self.intercept) + self.x.mean.len()
    }

    fn draw(&self, seed: u64, unit: u64, zeta: &mut [f64]) -> f64 {
        let (r, t) = (self.r, self.t);
        let mut rng = unit_stream(seed, unit, TAG_LATENT);
        self.init.fill(&mut rng, &mut zeta[..r]);
        let mut off = t * r;
        if self.intercept {
            zeta[off] = 1.0;
            off += 1;
        }
        self.x.fill(&mut rng, &mut zeta[off..]);
        let mut inn = unit_stream(seed, unit, TAG_INNOVATION);
        let mut xi = vec![0.0; r];
        for s in 0..t - 1 {
            for v in xi.iter_mut() {
                *v = if self.joint_normal {
                    inn.sample(StandardNormal)
                } else {
                    inn.sample::<f64, _>(Exp1) - 1.0
                };
            }
            for i in 0..r {
                let mut acc = 0.0;
                for j in 0..r {
                    acc += self.transitions[s][(i, j)] * zeta[s * r + j];
                    acc += self.innovations[s][(i, j)] * xi[j];
                }
                zeta[(s + 1) * r + i] = acc;
            }
        }
        let u0 = self.n_pre * r;
        self.selection.propensity(&zeta[u0..u0 + r], &zeta[t * r..])
    }
}

fn plugin_moments(sampler: &dyn LatentSampler) -> LatentMoments {
    let q = sampler.dim();
    let mut zeta = vec![0.0; q];
    let (mut w1, mut w0) = (0.0, 0.0);
    let (mut m1, mut m0) = (DVector::zeros(q), DVector::zeros(q));
    let (mut s1, mut s0) = (DMatrix::zeros(q, q), DMatrix::zeros(q, q));
    for i in 0..PLUGIN_DRAWS {
        let p = sampler.draw(PLUGIN_SEED, i as u64, &mut zeta);
        let z = DVector::from_column_slice(&zeta);
        w1 += p;
        w0 += 1.0 - p;
        m1.axpy(p, &z, 1.0);
        m0.axpy(1.0 - p, &z, 1.0);
        s1.ger(p, &z, &z, 1.0);
        s0.ger(1.0 - p, &z, &z, 1.0);
    }
    let n = PLUGIN_DRAWS as f64;
    let mean_all = (&m1 + &m0) / n;
    let second_all = (&s1 + &s0) / n;
    LatentMoments {
        p_treated: w1 / n,
        mean_treated: m1 / w1,
        second_treated: crate::numerics::symmetrize(&(s1 / w1)),
        mean_control: m0 / w0,
        second_control: crate::numerics::symmetrize(&(s0 / w0)),
        mean_all,
        second_all: crate::numerics::symmetrize(&second_all),
    }
}

static MOMENT_CACHE: LazyLock<Mutex<HashMap<String, Arc<LatentMoments>>>> =
    LazyLock::new(|| Mutex::new(HashMap::new()));

/// Short stable digest of a serializable value.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("configuration serializes");
    hex::encode(&Sha256::digest(json.as_bytes())[..8])
}

fn cached(
    key: String,
    compute: impl FnOnce() -> Result<LatentMoments>,
) -> Result<Arc<LatentMoments>> {
    let mut cache = MOMENT_CACHE.lock().unwrap_or_else(|e| e.into_inner());
    if let Some(m) = cache.get(&key) {
        return Ok(Arc::clone(m));
    }
    let m = Arc::new(compute()?);
    cache.insert(key, Arc::clone(&m));
    Ok(m)
}

/// Group moments of `(U; X)` under a factor configuration.
///
/// Exact under randomized assignment; otherwise a plug-in average over
/// [`PLUGIN_DRAWS`] fixed-seed draws, weighting each draw by its
/// propensity. Results are cached per configuration (ignoring `n_units`).
pub fn factor_latent_moments(cfg: &FactorDgpConfig) -> Result<Arc<LatentMoments>> {
    cfg.validate()?;
    let mut key_cfg = cfg.clone();
    key_cfg.n_units = 0;
    key_cfg.treatment_effect = TreatmentEffect::default();
    let key = format!("factor:{}", config_hash(&key_cfg));
    cached(key, || {
        if cfg.selection.kind == SelectionKind::Randomized {
            let (r, d) = (cfg.n_factors(), cfg.n_cov());
            let mut mean = DVector::zeros(r + d);
            let mut cov = DMatrix::zeros(r + d, r + d);
            mean.rows_mut(0, r).copy_from_slice(&cfg.confounder_mean);
            cov.view_mut((0, 0), (r, r)).copy_from(&cfg.confounder_cov);
            let off = r + usize::from(cfg.covariates.intercept);
            if cfg.covariates.intercept {
                mean[r] = 1.0;
            }
            let k = cfg.covariates.mean.len();
            mean.rows_mut(off, k).copy_from_slice(&cfg.covariates.mean);
            cov.view_mut((off, off), (k, k))
                .copy_from(&cfg.covariates.cov);
            let second = cov + &mean * mean.transpose();
            let p = cfg.selection.propensity(&[], &[]);
            Ok(LatentMoments {
                p_treated: p,
                mean_treated: mean.clone(),
                second_treated: second.clone(),
                mean_control: mean.clone(),
                second_control: second.clone(),
                mean_all: mean,
                second_all: second,
            })
        } else {
            Ok(plugin_moments(&FactorSampler::new(cfg)?))
        }
    })
}

/// Group moments of the full latent path `(U_{-T0}; ...; U_{T1}; X)`.
pub fn ar_latent_moments(cfg: &ArDgpConfig) -> Result<Arc<LatentMoments>> {
    cfg.validate()?;
    let mut key_cfg = cfg.clone();
    key_cfg.n_units = 0;
    key_cfg.treatment_effect = TreatmentEffect::default();
    let key = format!("ar:{}", config_hash(&key_cfg));
    cached(key, || Ok(plugin_moments(&ArSampler::new(cfg)?)))
}

/// Realized latent variables and counterfactuals behind a simulated panel.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub treatment: Vec<bool>,
    /// N x r confounders; for autoregressive confounders, the values at
    /// the target period.
    pub confounders: DMatrix<f64>,
    /// Per-period N x r confounders for autoregressive models.
    pub confounder_path: Option<Vec<DMatrix<f64>>>,
    /// N x d observed covariates.
    pub covariates: DMatrix<f64>,
    /// N x T idiosyncratic errors, periods `-T0..=T1`.
    pub noise: DMatrix<f64>,
    /// N x T untreated potential outcomes.
    pub potential_y0: DMatrix<f64>,
    /// Mean untreated target-period outcome over sampled treated units.
    pub gamma_true_sample: f64,
    /// Population value of the same quantity.
    pub gamma_true_population: f64,
    /// Mean untreated target-period outcome over all sampled units.
    pub mean_y0_sample: f64,
    /// Population mean untreated target-period outcome.
    pub mean_y0_population: f64,
    /// Number of pre periods; column `n_pre` of the outcome blocks is the
    /// target period.
    pub n_pre: usize,
}

impl GroundTruth {
    /// Restricts to a subset of units; sample means are recomputed.
    pub fn select_units(&self, idx: &[usize]) -> Self {
        let treatment: Vec<bool> = idx.iter().map(|&i| self.treatment[i]).collect();
        let potential_y0 = self.potential_y0.select_rows(idx);
        let (gs, ms) = sample_targets(&treatment, &potential_y0, self.n_pre);
        Self {
            treatment,
            confounders: self.confounders.select_rows(idx),
            confounder_path: self
                .confounder_path
                .as_ref()
                .map(|p| p.iter().map(|m| m.select_rows(idx)).collect()),
            covariates: self.covariates.select_rows(idx),
            noise: self.noise.select_rows(idx),
            potential_y0,
            gamma_true_sample: gs,
            gamma_true_population: self.gamma_true_population,
            mean_y0_sample: ms,
            mean_y0_population: self.mean_y0_population,
            n_pre: self.n_pre,
        }
    }
}

fn sample_targets(treatment: &[bool], y0: &DMatrix<f64>, target_col: usize) -> (f64, f64) {
    let n = treatment.len();
    let (mut st, mut nt, mut sa) = (0.0, 0usize, 0.0);
    for i in 0..n {
        let v = y0[(i, target_col)];
        sa += v;
        if treatment[i] {
            st += v;
            nt += 1;
        }
    }
    let gs = if nt > 0 { st / nt as f64 } else { f64::NAN };
    (gs, sa / n.max(1) as f64)
}

struct Engine<'a> {
    sampler: &'a dyn LatentSampler,
    design: DMatrix<f64>,
    n_units: usize,
    n_pre: usize,
    n_post: usize,
    n_cov: usize,
    n_factors: usize,
    path_periods: Option<usize>,
    noise: NoiseSpec,
    effect: &'a TreatmentEffect,
    moments: Arc<LatentMoments>,
}

impl Engine<'_> {
    fn run(&self, seed: u64) -> Result<(PanelDataset, GroundTruth)> {
        let (n, t0, t1, d, r) = (
            self.n_units,
            self.n_pre,
            self.n_post,
            self.n_cov,
            self.n_factors,
        );
        let t = t0 + t1 + 1;
        let q = self.sampler.dim();
        let mut zeta = vec![0.0; q];
        let mut eps = vec![0.0; t];
        let mut treatment = Vec::with_capacity(n);
        let mut covariates = DMatrix::zeros(n, d);
        let mut noise = DMatrix::zeros(n, t);
        let mut y0 = DMatrix::zeros(n, t);
        let mut confounders = DMatrix::zeros(n, r);
        let mut path: Option<Vec<DMatrix<f64>>> =
            self.path_periods.map(|tp| vec![DMatrix::zeros(n, r); tp]);
        for i in 0..n {
            let p = self.sampler.draw(seed, i as u64, &mut zeta);
            let u: f64 = unit_stream(seed, i as u64, TAG_TREATMENT).random();
            treatment.push(u < p);
            let mut nrng = unit_stream(seed, i as u64, TAG_NOISE);
            self.noise.draw(&mut nrng, t0, &mut eps);
            for j in 0..d {
                covariates[(i, j)] = zeta[q - d + j];
            }
            match path.as_mut() {
                Some(path) => {
                    for (s, m) in path.iter_mut().enumerate() {
                        for k in 0..r {
                            m[(i, k)] = zeta[s * r + k];
                        }
                    }
                    for k in 0..r {
                        confounders[(i, k)] = zeta[t0 * r + k];
                    }
                }
                None => {
                    for k in 0..r {
                        confounders[(i, k)] = zeta[k];
                    }
                }
            }
            for s in 0..t {
                let mut acc = eps[s];
                for j in 0..q {
                    acc += self.design[(s, j)] * zeta[j];
                }
                y0[(i, s)] = acc;
                noise[(i, s)] = eps[s];
            }
        }
        let mut y_obs = y0.clone();
        for i in 0..n {
            if treatment[i] {
                for s in t0..t {
                    y_obs[(i, s)] += self.effect.at(s - t0);
                }
            }
        }
        let data = PanelDataset::new(
            treatment.clone(),
            covariates.clone(),
            y_obs.columns(0, t0).into_owned(),
            y_obs.column(t0).into_owned(),
            y_obs.columns(t0 + 1, t1).into_owned(),
        )?;
        let (gs, ms) = sample_targets(&treatment, &y0, t0);
        let f0 = self.design.row(t0);
        let truth = GroundTruth {
            treatment,
            confounders,
            confounder_path: path,
            covariates,
            noise,
            potential_y0: y0,
            gamma_true_sample: gs,
            gamma_true_population: (f0 * &self.moments.mean_treated)[0],
            mean_y0_sample: ms,
            mean_y0_population: (f0 * &self.moments.mean_all)[0],
            n_pre: t0,
        };
        Ok((data, truth))
    }
}

/// Simulates a static factor panel.
pub fn simulate_factor(cfg: &FactorDgpConfig, seed: u64) -> Result<(PanelDataset, GroundTruth)> {
    cfg.validate()?;
    let moments = factor_latent_moments(cfg)?;
    let sampler = FactorSampler::new(cfg)?;
    Engine {
        sampler: &sampler,
        design: cfg.design(),
        n_units: cfg.n_units,
        n_pre: cfg.n_pre,
        n_post: cfg.n_post,
        n_cov: cfg.n_cov(),
        n_factors: cfg.n_factors(),
        path_periods: None,
        noise: cfg.noise,
        effect: &cfg.treatment_effect,
        moments,
    }
    .run(seed)
}

/// Simulates a two-way fixed-effects panel.
pub fn simulate_twfe(cfg: &TwfeConfig, seed: u64) -> Result<(PanelDataset, GroundTruth)> {
    simulate_factor(&cfg.to_factor()?, seed)
}

/// Simulates a panel with autoregressive confounders.
pub fn simulate_ar(cfg: &ArDgpConfig, seed: u64) -> Result<(PanelDataset, GroundTruth)> {
    cfg.validate()?;
    let moments = ar_latent_moments(cfg)?;
    let sampler = ArSampler::new(cfg)?;
    Engine {
        sampler: &sampler,
        design: cfg.design(),
        n_units: cfg.n_units,
        n_pre: cfg.n_pre,
        n_post: cfg.n_post,
        n_cov: cfg.n_cov(),
        n_factors: cfg.n_factors(),
        path_periods: Some(cfg.n_periods()),
        noise: cfg.noise,
        effect: &cfg.treatment_effect,
        moments,
    }
    .run(seed)
}
