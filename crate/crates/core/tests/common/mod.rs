//! Configurations shared by the integration tests.
#![allow(dead_code)]

use minbridge::dgp::{
    ArDgpConfig, CovariateSpec, FactorDgpConfig, NoiseSpec, SelectionKind, SelectionModel,
    TreatmentEffect, TwfeConfig,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn logistic(intercept: f64, coef_u: Vec<f64>, coef_x: Vec<f64>) -> SelectionModel {
    SelectionModel {
        kind: SelectionKind::Logistic,
        intercept,
        coef_u,
        coef_x,
        min_propensity: 0.01,
    }
}

/// r = 2, T0 = 4, T1 = 3, intercept covariate, logistic selection on U.
pub fn reference_factor(n_units: usize, sigma: f64) -> FactorDgpConfig {
    #[rustfmt::skip]
    let loadings = DMatrix::from_row_slice(8, 2, &[
        1.0,  0.6,
        0.8, -0.7,
        1.2,  0.9,
        0.9, -0.5,
        1.0,  0.5,
        1.1, -0.8,
        0.7,  1.0,
        1.3, -0.4,
    ]);
    FactorDgpConfig {
        n_units,
        n_pre: 4,
        n_post: 3,
        loadings,
        cov_coefs: DMatrix::from_column_slice(8, 1, &[0.5, 0.2, 0.0, 0.3, 0.4, -0.1, 0.6, 0.2]),
        confounder_mean: vec![1.0, 0.0],
        confounder_cov: DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]),
        covariates: CovariateSpec::intercept_only(),
        noise: NoiseSpec::iid(sigma),
        selection: logistic(-0.5, vec![0.6, -0.6], vec![0.0]),
        treatment_effect: TreatmentEffect::Constant(1.0),
    }
}

pub fn reference_twfe(n_units: usize, sigma: f64) -> TwfeConfig {
    TwfeConfig {
        n_units,
        n_pre: 4,
        n_post: 3,
        unit_effect_mean: 0.5,
        unit_effect_var: 1.0,
        time_effects: vec![0.0, 0.3, 0.1, 0.6, 0.8, 1.0, 0.7, 1.2],
        noise: NoiseSpec::iid(sigma),
        selection: logistic(0.0, vec![0.8], vec![]),
        treatment_effect: TreatmentEffect::Constant(2.0),
    }
}

/// Gaussian loadings from a fixed seed.
pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Random identified factor configuration with `T0 = r + extra`.
pub fn random_factor(seed: u64, extra: usize) -> FactorDgpConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rng.random_range(1..=3usize);
    let with_x = rng.random_bool(0.5);
    let d = usize::from(with_x);
    let n_pre = r + extra;
    let n_post = r + rng.random_range(0..=1usize);
    let t = n_pre + n_post + 1;
    let coef_u: Vec<f64> = (0..r).map(|_| rng.random_range(-0.8..0.8)).collect();
    FactorDgpConfig {
        n_units: 1000,
        n_pre,
        n_post,
        loadings: random_matrix(&mut rng, t, r),
        cov_coefs: if with_x {
            random_matrix(&mut rng, t, 1)
        } else {
            DMatrix::zeros(0, 0)
        },
        confounder_mean: (0..r).map(|_| rng.random_range(-1.0..1.0)).collect(),
        confounder_cov: DMatrix::identity(r, r),
        covariates: if with_x {
            CovariateSpec::intercept_only()
        } else {
            CovariateSpec::default()
        },
        noise: NoiseSpec::iid(rng.random_range(0.5..1.5)),
        selection: logistic(0.0, coef_u, vec![0.0; d]),
        treatment_effect: TreatmentEffect::default(),
    }
}

/// Scalar autoregressive confounder with persistence 0.7, intercept
/// covariate and selection on `U_0`.
pub fn reference_ar(n_units: usize, n_pre: usize) -> ArDgpConfig {
    let n_post = 2;
    let t = n_pre + n_post + 1;
    let loadings = DMatrix::from_fn(t, 1, |s, _| 1.0 + 0.25 * ((s % 3) as f64));
    ArDgpConfig {
        n_units,
        n_pre,
        n_post,
        loadings,
        cov_coefs: DMatrix::from_fn(t, 1, |s, _| 0.1 * s as f64),
        covariates: CovariateSpec::intercept_only(),
        noise: NoiseSpec::iid(1.0),
        selection: logistic(-0.3, vec![1.0], vec![0.0]),
        treatment_effect: TreatmentEffect::Constant(1.0),
        transitions: vec![DMatrix::from_element(1, 1, 0.7)],
        innovation_cov: vec![DMatrix::from_element(1, 1, 0.51)],
        init_mean: vec![0.0],
        init_cov: DMatrix::from_element(1, 1, 1.0),
        joint_normal: true,
    }
}

/// Smallest nonzero singular value of the population `K` accepted by
/// [`random_identified_factor`].
pub const MIN_K_SINGULAR_VALUE: f64 = 0.05;

/// Draws [`random_factor`] configurations from consecutive seeds until one
/// is identified with every nonzero singular value of the population `K`
/// at least [`MIN_K_SINGULAR_VALUE`]. Returns the seed used and the config.
pub fn random_identified_factor(seed: u64, extra: usize) -> (u64, FactorDgpConfig) {
    (seed..seed + 1000)
        .map(|s| (s, random_factor(s, extra)))
        .find(|(_, cfg)| {
            if !minbridge::oracle::identification_check(cfg)
                .unwrap()
                .identified
            {
                return false;
            }
            let k = minbridge::oracle::population_k_b(cfg).unwrap().k;
            let sv = minbridge::numerics::singular_values(&k).unwrap();
            let top = sv.iter().copied().fold(0.0, f64::max);
            sv.iter()
                .filter(|&&s| s > 1e-10 * top)
                .all(|&s| s >= MIN_K_SINGULAR_VALUE)
        })
        .expect("a well-conditioned configuration within 1000 seeds")
}
