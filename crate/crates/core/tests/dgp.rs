mod common;

use nalgebra::DMatrix;

use minbridge::dgp::{simulate_ar, simulate_factor, simulate_twfe, NoiseDependence, NoiseSpec};

#[test]
fn same_seed_same_panel() {
    let cfg = common::reference_factor(300, 1.0);
    let (a, ta) = simulate_factor(&cfg, 17).unwrap();
    let (b, tb) = simulate_factor(&cfg, 17).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta.potential_y0, tb.potential_y0);
    let (c, _) = simulate_factor(&cfg, 18).unwrap();
    assert_ne!(a.y_pre(), c.y_pre());
}

#[test]
fn units_do_not_depend_on_panel_size() {
    let (small, ts) = simulate_factor(&common::reference_factor(100, 1.0), 3).unwrap();
    let (large, tl) = simulate_factor(&common::reference_factor(700, 1.0), 3).unwrap();
    let idx: Vec<usize> = (0..100).collect();
    assert_eq!(small, large.select_units(&idx));
    assert_eq!(ts.confounders, tl.confounders.select_rows(&idx));
}

#[test]
fn outcomes_follow_the_factor_structure() {
    let cfg = common::reference_factor(200, 0.7);
    let (_, truth) = simulate_factor(&cfg, 9).unwrap();
    let mean =
        &truth.confounders * cfg.loadings.transpose() + &truth.covariates * cfg.coefs().transpose();
    let resid = &truth.potential_y0 - mean;
    assert!((resid - &truth.noise).amax() < 1e-12);
    let s = truth.noise.iter().map(|e| e * e).sum::<f64>() / truth.noise.len() as f64;
    assert!((s.sqrt() - 0.7).abs() < 0.03);
}

#[test]
fn sample_target_is_treated_mean_of_untreated_outcome() {
    let (data, truth) = simulate_factor(&common::reference_factor(500, 1.0), 4).unwrap();
    let (treated, _) = data.group_indices();
    let direct = treated
        .iter()
        .map(|&i| truth.potential_y0[(i, truth.n_pre)])
        .sum::<f64>()
        / treated.len() as f64;
    assert!((direct - truth.gamma_true_sample).abs() < 1e-12);
    assert!((truth.gamma_true_sample - truth.gamma_true_population).abs() < 0.3);
}

#[test]
fn selection_on_confounders_shifts_treated_mean() {
    let (_, truth) = simulate_factor(&common::reference_factor(20_000, 1.0), 5).unwrap();
    let mean_u0 = |treated: bool| {
        let rows: Vec<f64> = (0..truth.treatment.len())
            .filter(|&i| truth.treatment[i] == treated)
            .map(|i| truth.confounders[(i, 0)])
            .collect();
        rows.iter().sum::<f64>() / rows.len() as f64
    };
    // Selection loads positively on the first confounder.
    assert!(mean_u0(true) > mean_u0(false) + 0.2);
}

#[test]
fn noiseless_twfe_is_parallel() {
    let (data, truth) = simulate_twfe(&common::reference_twfe(50, 0.0), 1).unwrap();
    for i in 0..50 {
        let y = truth.potential_y0.row(i);
        let first = y[0];
        let offsets: Vec<f64> = y.iter().map(|v| v - first).collect();
        let y0 = truth.potential_y0.row(0);
        for (s, off) in offsets.iter().enumerate() {
            assert!((off - (y0[s] - y0[0])).abs() < 1e-12);
        }
    }
    assert_eq!(data.n_cov(), 1);
}

#[test]
fn two_block_noise_correlates_within_blocks() {
    let mut cfg = common::reference_factor(20_000, 1.0);
    cfg.noise = NoiseSpec {
        sigma: 1.0,
        dependence: NoiseDependence::TwoBlock { corr: 0.5 },
    };
    let (_, truth) = simulate_factor(&cfg, 2).unwrap();
    let e = &truth.noise;
    let corr = |a: usize, b: usize| e.column(a).dot(&e.column(b)) / e.nrows() as f64;
    assert!((corr(0, 1) - 0.5).abs() < 0.05);
    assert!((corr(cfg.n_pre + 1, cfg.n_pre + 2) - 0.5).abs() < 0.05);
    assert!(corr(0, cfg.n_pre + 1).abs() < 0.05);
}

#[test]
fn ar_confounders_follow_the_recursion() {
    let cfg = common::reference_ar(20_000, 4);
    let (_, truth) = simulate_ar(&cfg, 8).unwrap();
    let path = truth.confounder_path.as_ref().unwrap();
    assert_eq!(path.len(), cfg.n_periods());
    assert_eq!(truth.confounders, path[cfg.n_pre]);
    // Stationary: Var(U_t) = 0.49 + 0.51 = 1 and lag-one covariance 0.7.
    let n = path[0].nrows() as f64;
    let var = path[3].column(0).norm_squared() / n;
    let lag = path[3].column(0).dot(&path[2].column(0)) / n;
    assert!((var - 1.0).abs() < 0.05);
    assert!((lag - 0.7).abs() < 0.05);
}

#[test]
fn ar_outcomes_use_contemporaneous_confounders() {
    let cfg = common::reference_ar(100, 3);
    let (_, truth) = simulate_ar(&cfg, 6).unwrap();
    let path = truth.confounder_path.unwrap();
    let coefs = cfg.coefs();
    for s in 0..cfg.n_periods() {
        let mean = &path[s] * cfg.loadings.row(s).transpose()
            + &truth.covariates * coefs.row(s).transpose();
        let diff = truth.potential_y0.column(s) - mean - truth.noise.column(s);
        assert!(diff.amax() < 1e-12);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = common::reference_factor(10, 1.0);
    cfg.confounder_cov = DMatrix::identity(3, 3);
    assert!(simulate_factor(&cfg, 1).unwrap_err().is_validation());
    let mut ar = common::reference_ar(10, 2);
    ar.transitions = vec![DMatrix::identity(1, 1); 2];
    assert!(simulate_ar(&ar, 1).unwrap_err().is_validation());
}
