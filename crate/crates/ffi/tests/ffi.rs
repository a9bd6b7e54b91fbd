//! Exercises the C interface from Rust through the exported symbols.

use std::ffi::{c_char, CStr, CString};
use std::ptr;

use minbridge::bridge::LambdaRule;
use minbridge::harness::{estimate_method, DgpSpec, EstimatorKind, EstimatorOptions};
use minbridge::panel::PanelDataset;
use minbridge_ffi::*;

fn config_text() -> String {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/factor.toml");
    std::fs::read_to_string(path).unwrap()
}

fn simulate(seed: u64) -> *mut MbPanel {
    let text = CString::new(config_text()).unwrap();
    let mut panel = ptr::null_mut();
    let status = unsafe { mb_panel_simulate(text.as_ptr(), seed, &mut panel) };
    assert_eq!(status, MbStatus::Ok);
    assert!(!panel.is_null());
    panel
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(mb_last_error_message()) }
        .to_str()
        .unwrap()
        .to_owned()
}

fn estimate(panel: *const MbPanel, method: MbMethod) -> *mut MbEstimate {
    let mut est = ptr::null_mut();
    let status = unsafe { mb_estimate(panel, method as u32, ptr::null(), &mut est) };
    assert_eq!(status, MbStatus::Ok, "{method:?}: {}", last_error());
    est
}

fn summary(est: *const MbEstimate) -> MbSummary {
    let mut s = MbSummary {
        estimate: 0.0,
        sigma2_hat: 0.0,
        ci_lower: 0.0,
        ci_upper: 0.0,
        lambda: 0.0,
        theta_len: 0,
    };
    assert_eq!(unsafe { mb_estimate_summary(est, &mut s) }, MbStatus::Ok);
    s
}

fn json(est: *const MbEstimate) -> serde_json::Value {
    let mut len = 0usize;
    let status = unsafe { mb_estimate_json(est, ptr::null_mut(), 0, &mut len) };
    assert_eq!(status, MbStatus::BufferTooSmall);
    let mut buf = vec![0 as c_char; len + 1];
    let status = unsafe { mb_estimate_json(est, buf.as_mut_ptr(), buf.len(), &mut len) };
    assert_eq!(status, MbStatus::Ok);
    let text = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap();
    assert_eq!(text.len(), len);
    serde_json::from_str(text).unwrap()
}

/// Row-major outcomes in the layout `mb_panel_from_arrays` expects.
fn to_arrays(p: &PanelDataset) -> (Vec<f64>, Vec<u8>, Vec<f64>) {
    let mut y = Vec::new();
    let mut x = Vec::new();
    for i in 0..p.n_units() {
        y.extend(p.y_pre().row(i).iter());
        y.push(p.y_target()[i]);
        y.extend(p.y_post().row(i).iter());
        x.extend(p.covariates().row(i).iter());
    }
    let d = p.treatment().iter().map(|&t| t as u8).collect();
    (y, d, x)
}

#[test]
fn every_method_matches_the_library() {
    let spec: DgpSpec = toml::from_str(&config_text()).unwrap();
    let (data, _) = spec.simulate(7).unwrap();
    let panel = simulate(7);
    let opts = EstimatorOptions {
        lambda: LambdaRule { c: 1.0, beta: 0.75 },
        rho: 0.05,
        ridge: 0.0,
        factor_rank: Some(1),
        holdout_pre: 0,
    };
    let methods = [
        (MbMethod::Did, EstimatorKind::Did),
        (MbMethod::Horizontal, EstimatorKind::Horizontal),
        (MbMethod::Vertical, EstimatorKind::Vertical),
        (MbMethod::Factor4step, EstimatorKind::Factor4step),
        (MbMethod::BridgeIdentity, EstimatorKind::BridgeIdentity),
        (MbMethod::BridgeTwoStage, EstimatorKind::BridgeTwoStage),
        (MbMethod::BridgePopulation, EstimatorKind::BridgePopulation),
    ];
    for (method, kind) in methods {
        let expected = estimate_method(kind, &data, &opts).unwrap();
        let est = estimate(panel, method);
        let s = summary(est);
        assert_eq!(s.estimate, expected.outcome.estimate, "{method:?}");
        assert_eq!(s.sigma2_hat.is_nan(), expected.outcome.sigma2_hat.is_none());
        let v = json(est);
        assert_eq!(v["method"], kind.name());
        assert_eq!(v["gamma_hat"].as_f64().unwrap(), expected.outcome.estimate);

        let mut len = 0usize;
        let mut theta = vec![0.0; s.theta_len];
        let status = unsafe { mb_estimate_theta(est, theta.as_mut_ptr(), theta.len(), &mut len) };
        assert_eq!(status, MbStatus::Ok);
        assert_eq!(len, s.theta_len);
        match &expected.theta {
            Some(t) => assert_eq!(theta.as_slice(), t.as_slice()),
            None => assert_eq!(len, 0),
        }
        unsafe { mb_estimate_free(est) };
    }
    unsafe { mb_panel_free(panel) };
}

#[test]
fn arrays_round_trip_gives_identical_estimates() {
    let spec: DgpSpec = toml::from_str(&config_text()).unwrap();
    let (data, _) = spec.simulate(11).unwrap();
    let (y, d, x) = to_arrays(&data);
    let mut from_arrays = ptr::null_mut();
    let status = unsafe {
        mb_panel_from_arrays(
            data.n_units(),
            data.n_pre(),
            data.n_post(),
            y.as_ptr(),
            d.as_ptr(),
            data.n_cov(),
            x.as_ptr(),
            &mut from_arrays,
        )
    };
    assert_eq!(status, MbStatus::Ok, "{}", last_error());
    let simulated = simulate(11);

    let (mut n, mut pre, mut post, mut treated) = (0, 0, 0, 0);
    let status = unsafe { mb_panel_dims(from_arrays, &mut n, &mut pre, &mut post, &mut treated) };
    assert_eq!(status, MbStatus::Ok);
    assert_eq!(
        (n, pre, post, treated),
        (
            data.n_units(),
            data.n_pre(),
            data.n_post(),
            data.n_treated()
        )
    );

    let a = estimate(from_arrays, MbMethod::BridgeTwoStage);
    let b = estimate(simulated, MbMethod::BridgeTwoStage);
    assert_eq!(summary(a), summary(b));
    unsafe {
        mb_estimate_free(a);
        mb_estimate_free(b);
        mb_panel_free(from_arrays);
        mb_panel_free(simulated);
    }
}

#[test]
fn csv_loading_matches_simulation() {
    let spec: DgpSpec = toml::from_str(&config_text()).unwrap();
    let (data, _) = spec.simulate(3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("panel.csv");
    minbridge::panel::write_panel_csv(&path, &data, &[]).unwrap();
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut loaded = ptr::null_mut();
    assert_eq!(
        unsafe { mb_panel_load_csv(c_path.as_ptr(), &mut loaded) },
        MbStatus::Ok
    );
    let simulated = simulate(3);
    let a = estimate(loaded, MbMethod::BridgeIdentity);
    let b = estimate(simulated, MbMethod::BridgeIdentity);
    assert!((summary(a).estimate - summary(b).estimate).abs() < 1e-10);
    unsafe {
        mb_estimate_free(a);
        mb_estimate_free(b);
        mb_panel_free(loaded);
        mb_panel_free(simulated);
    }
}

#[test]
fn options_change_the_penalty() {
    let panel = simulate(5);
    let mut opts = mb_options_default();
    opts.lambda_c = 4.0;
    let mut est = ptr::null_mut();
    let status = unsafe { mb_estimate(panel, MbMethod::BridgeIdentity as u32, &opts, &mut est) };
    assert_eq!(status, MbStatus::Ok);
    let s = summary(est);
    let expected = 4.0 * 2000f64.powf(-0.75);
    assert!((s.lambda - expected).abs() < 1e-15);
    assert!(s.ci_lower < s.estimate && s.estimate < s.ci_upper);
    unsafe {
        mb_estimate_free(est);
        mb_panel_free(panel);
    }
}

#[test]
fn theta_buffer_too_small_copies_nothing() {
    let panel = simulate(5);
    let est = estimate(panel, MbMethod::BridgeTwoStage);
    let n = summary(est).theta_len;
    assert!(n > 1);
    let mut buf = vec![-1.0; n - 1];
    let mut len = 0usize;
    let status = unsafe { mb_estimate_theta(est, buf.as_mut_ptr(), buf.len(), &mut len) };
    assert_eq!(status, MbStatus::BufferTooSmall);
    assert_eq!(len, n);
    assert!(buf.iter().all(|&v| v == -1.0));
    assert!(last_error().contains("theta needs"));
    unsafe {
        mb_estimate_free(est);
        mb_panel_free(panel);
    }
}

#[test]
fn null_and_invalid_arguments_are_reported() {
    let mut panel = ptr::null_mut();
    let mut est = ptr::null_mut();
    unsafe {
        assert_eq!(
            mb_panel_simulate(ptr::null(), 1, &mut panel),
            MbStatus::NullPointer
        );
        assert_eq!(last_error(), "config_toml is null");
        assert_eq!(
            mb_estimate(ptr::null(), 0, ptr::null(), &mut est),
            MbStatus::NullPointer
        );
        assert_eq!(
            mb_estimate_summary(ptr::null(), ptr::null_mut()),
            MbStatus::NullPointer
        );

        let bad = CString::new("kind = \"factor\"\nn_units = \"many\"").unwrap();
        assert_eq!(
            mb_panel_simulate(bad.as_ptr(), 1, &mut panel),
            MbStatus::InvalidArgument
        );
        assert!(panel.is_null());

        let missing = CString::new("/nonexistent/panel.csv").unwrap();
        assert_eq!(
            mb_panel_load_csv(missing.as_ptr(), &mut panel),
            MbStatus::InvalidArgument
        );

        let good = simulate(1);
        assert_eq!(
            mb_estimate(good, 99, ptr::null(), &mut est),
            MbStatus::InvalidArgument
        );
        assert_eq!(last_error(), "unknown method 99");
        assert!(est.is_null());
        let mut opts = mb_options_default();
        opts.lambda_beta = 0.4;
        let status = mb_estimate(good, MbMethod::BridgeTwoStage as u32, &opts, &mut est);
        assert_eq!(status, MbStatus::InvalidArgument);
        mb_panel_free(good);

        mb_panel_free(ptr::null_mut());
        mb_estimate_free(ptr::null_mut());
    }
}

#[test]
fn malformed_arrays_are_rejected() {
    let y = [
        1.0,
        2.0,
        3.0,
        f64::NAN,
        2.0,
        3.0,
        1.0,
        2.0,
        3.0,
        1.0,
        2.0,
        3.0,
    ];
    let ok = [1u8, 1, 0, 0];
    let bad_flag = [1u8, 2, 0, 0];
    let mut panel = ptr::null_mut();
    unsafe {
        let status =
            mb_panel_from_arrays(4, 1, 1, y.as_ptr(), ok.as_ptr(), 0, ptr::null(), &mut panel);
        assert_eq!(status, MbStatus::InvalidArgument);
        let y = [1.0; 12];
        let status = mb_panel_from_arrays(
            4,
            1,
            1,
            y.as_ptr(),
            bad_flag.as_ptr(),
            0,
            ptr::null(),
            &mut panel,
        );
        assert_eq!(status, MbStatus::InvalidArgument);
        assert!(last_error().contains("treatment flag 2"));
        let status =
            mb_panel_from_arrays(4, 1, 1, y.as_ptr(), ok.as_ptr(), 1, ptr::null(), &mut panel);
        assert_eq!(status, MbStatus::NullPointer);
        let status = mb_panel_from_arrays(
            4,
            1,
            1,
            ptr::null(),
            ok.as_ptr(),
            0,
            ptr::null(),
            &mut panel,
        );
        assert_eq!(status, MbStatus::NullPointer);
        assert!(panel.is_null());
    }
}

#[test]
fn rank_deficient_design_is_an_estimation_failure() {
    // Two controls cannot identify a horizontal regression on three pre
    // periods plus an intercept.
    let mut y = Vec::new();
    let d = [1u8, 1, 0, 0];
    for i in 0..4 {
        let s = i as f64;
        y.extend([s, 2.0 * s + 1.0, 0.5 * s, s + 3.0, 1.0 - s]);
    }
    let mut panel = ptr::null_mut();
    let mut est = ptr::null_mut();
    unsafe {
        let status =
            mb_panel_from_arrays(4, 3, 1, y.as_ptr(), d.as_ptr(), 0, ptr::null(), &mut panel);
        assert_eq!(status, MbStatus::Ok, "{}", last_error());
        let status = mb_estimate(panel, MbMethod::Horizontal as u32, ptr::null(), &mut est);
        assert_eq!(status, MbStatus::EstimationFailed, "{}", last_error());
        mb_panel_free(panel);
    }
}
