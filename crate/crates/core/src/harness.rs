//! Monte Carlo replication engine and scenario reports.
//!
//! Each replication draws its own dataset from a sub-seed derived from the
//! master seed and the replication index, so results do not depend on
//! thread scheduling or on how replications are split across runs.

use std::io::Write;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    did_inference, estimate_did, estimate_factor4step, estimate_horizontal, estimate_vertical,
};
use crate::bridge::{estimate_bridge, estimate_population_mean, LambdaRule, WeightSpec};
use crate::dgp::{
    ar_latent_moments, config_hash, factor_latent_moments, simulate_ar, simulate_factor,
    ArDgpConfig, FactorDgpConfig, GroundTruth, TwfeConfig,
};
use crate::error::{Error, Result};
use crate::panel::PanelDataset;
use crate::rng::mix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DgpSpec {
    Factor(FactorDgpConfig),
    Twfe(TwfeConfig),
    Ar(ArDgpConfig),
}

impl DgpSpec {
    pub fn n_units(&self) -> usize {
        match self {
            DgpSpec::Factor(c) => c.n_units,
            DgpSpec::Twfe(c) => c.n_units,
            DgpSpec::Ar(c) => c.n_units,
        }
    }

    pub fn with_n_units(&self, n: usize) -> Self {
        let mut out = self.clone();
        match &mut out {
            DgpSpec::Factor(c) => c.n_units = n,
            DgpSpec::Twfe(c) => c.n_units = n,
            DgpSpec::Ar(c) => c.n_units = n,
        }
        out
    }

    pub fn n_factors(&self) -> usize {
        match self {
            DgpSpec::Factor(c) => c.n_factors(),
            DgpSpec::Twfe(_) => 1,
            DgpSpec::Ar(c) => c.n_factors(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DgpSpec::Factor(c) => c.validate(),
            DgpSpec::Twfe(c) => c.to_factor()?.validate(),
            DgpSpec::Ar(c) => c.validate(),
        }
    }

    pub fn simulate(&self, seed: u64) -> Result<(PanelDataset, GroundTruth)> {
        match self {
            DgpSpec::Factor(c) => simulate_factor(c, seed),
            DgpSpec::Twfe(c) => simulate_factor(&c.to_factor()?, seed),
            DgpSpec::Ar(c) => simulate_ar(c, seed),
        }
    }

    /// Computes the cached population moments up front so parallel
    /// replications do not race to build them.
    fn warm(&self) -> Result<()> {
        match self {
            DgpSpec::Factor(c) => factor_latent_moments(c).map(drop),
            DgpSpec::Twfe(c) => factor_latent_moments(&c.to_factor()?).map(drop),
            DgpSpec::Ar(c) => ar_latent_moments(c).map(drop),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Did,
    Horizontal,
    Vertical,
    Factor4step,
    BridgeIdentity,
    BridgeTwoStage,
    /// Whole-population mean with the optimal joint weight.
    BridgePopulation,
    /// Bridge fit that uses the held-out oldest pre periods as instruments
    /// in place of post-treatment outcomes.
    BridgeExtraPre,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 8] = [
        EstimatorKind::Did,
        EstimatorKind::Horizontal,
        EstimatorKind::Vertical,
        EstimatorKind::Factor4step,
        EstimatorKind::BridgeIdentity,
        EstimatorKind::BridgeTwoStage,
        EstimatorKind::BridgePopulation,
        EstimatorKind::BridgeExtraPre,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Did => "did",
            EstimatorKind::Horizontal => "horizontal",
            EstimatorKind::Vertical => "vertical",
            EstimatorKind::Factor4step => "factor4step",
            EstimatorKind::BridgeIdentity => "bridge_identity",
            EstimatorKind::BridgeTwoStage => "bridge_two_stage",
            EstimatorKind::BridgePopulation => "bridge_population",
            EstimatorKind::BridgeExtraPre => "bridge_extra_pre",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Whether the estimand is the whole-population mean rather than the
    /// treated mean.
    pub fn targets_population_mean(self) -> bool {
        self == EstimatorKind::BridgePopulation
    }
}

/// Which counterfactual value estimates are compared against.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Average over the sampled units.
    #[default]
    Sample,
    /// Population expectation.
    Population,
}

/// Tuning shared by every estimator in a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorOptions {
    #[serde(default)]
    pub lambda: LambdaRule,
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Ridge penalty of the horizontal regression.
    #[serde(default)]
    pub ridge: f64,
    /// Rank of the four-step factor estimator; defaults to the true rank.
    #[serde(default)]
    pub factor_rank: Option<usize>,
    /// Number of oldest pre periods withheld from every estimator except
    /// `bridge_extra_pre`, which uses them as instruments.
    #[serde(default)]
    pub holdout_pre: usize,
}

fn default_rho() -> f64 {
    0.05
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            lambda: LambdaRule::default(),
            rho: default_rho(),
            ridge: 0.0,
            factor_rank: None,
            holdout_pre: 0,
        }
    }
}

/// Point estimate with optional inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimatorOutcome {
    pub estimate: f64,
    pub sigma2_hat: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub lambda: Option<f64>,
}

impl EstimatorOutcome {
    fn point(estimate: f64) -> Self {
        Self {
            estimate,
            sigma2_hat: None,
            ci: None,
            lambda: None,
        }
    }
}

/// Runs one estimator on one dataset.
pub fn run_estimator(
    kind: EstimatorKind,
    data: &PanelDataset,
    opts: &EstimatorOptions,
    default_rank: usize,
) -> Result<EstimatorOutcome> {
    let k = opts.holdout_pre;
    let trimmed;
    let main = if k > 0 && kind != EstimatorKind::BridgeExtraPre {
        trimmed = data.drop_leading_pre(k)?;
        &trimmed
    } else {
        data
    };
    let lambda = || opts.lambda.value(data.n_units());
    let bridge = |res: crate::bridge::EstimateResult| EstimatorOutcome {
        estimate: res.gamma_hat,
        sigma2_hat: Some(res.sigma2_hat),
        ci: Some(res.ci),
        lambda: Some(res.lambda),
    };
    match kind {
        EstimatorKind::Did => {
            let (s2, ci) = did_inference(main, opts.rho)?;
            Ok(EstimatorOutcome {
                estimate: estimate_did(main)?.gamma_hat,
                sigma2_hat: Some(s2),
                ci: Some(ci),
                lambda: None,
            })
        }
        EstimatorKind::Horizontal => Ok(EstimatorOutcome::point(
            estimate_horizontal(main, opts.ridge)?.gamma_hat,
        )),
        EstimatorKind::Vertical => Ok(EstimatorOutcome::point(estimate_vertical(main)?.gamma_hat)),
        EstimatorKind::Factor4step => Ok(EstimatorOutcome::point(
            estimate_factor4step(main, opts.factor_rank.unwrap_or(default_rank))?.gamma_hat,
        )),
        EstimatorKind::BridgeIdentity => Ok(bridge(estimate_bridge(
            main,
            &WeightSpec::Identity,
            lambda()?,
            opts.rho,
        )?)),
        EstimatorKind::BridgeTwoStage => Ok(bridge(estimate_bridge(
            main,
            &WeightSpec::OptimalTwoStage { jitter: None },
            lambda()?,
            opts.rho,
        )?)),
        EstimatorKind::BridgePopulation => Ok(bridge(estimate_population_mean(
            main,
            &WeightSpec::OptimalTwoStage { jitter: None },
            lambda()?,
            opts.rho,
        )?)),
        EstimatorKind::BridgeExtraPre => {
            if k == 0 {
                return Err(Error::InvalidConfig(
                    "bridge_extra_pre needs holdout_pre > 0".into(),
                ));
            }
            let swapped = data.substitute_leading_pre_for_post(k)?;
            Ok(bridge(estimate_bridge(
                &swapped,
                &WeightSpec::Identity,
                lambda()?,
                opts.rho,
            )?))
        }
    }
}

/// One estimator's result on a full dataset, as reported by the command
/// line and C interfaces.
#[derive(Debug, Clone)]
pub struct MethodReport {
    pub outcome: EstimatorOutcome,
    /// Stacked bridge coefficients `(theta1; theta2)`; `None` for baselines.
    pub theta: Option<DVector<f64>>,
    /// Result summary including a `"method"` field.
    pub json: serde_json::Value,
}

/// Runs one estimator without holding out periods. Bridge methods report
/// their coefficients and diagnostics; the four-step estimator uses
/// `opts.factor_rank`, defaulting to 1.
pub fn estimate_method(
    kind: EstimatorKind,
    data: &PanelDataset,
    opts: &EstimatorOptions,
) -> Result<MethodReport> {
    if kind == EstimatorKind::BridgeExtraPre {
        return Err(Error::InvalidConfig(
            "bridge_extra_pre is a simulation diagnostic only".into(),
        ));
    }
    let bridge_weight = match kind {
        EstimatorKind::BridgeIdentity => Some(WeightSpec::Identity),
        EstimatorKind::BridgeTwoStage | EstimatorKind::BridgePopulation => {
            Some(WeightSpec::OptimalTwoStage { jitter: None })
        }
        _ => None,
    };
    let mut report = match bridge_weight {
        Some(weight) => {
            let lambda = opts.lambda.value(data.n_units())?;
            let res = if kind == EstimatorKind::BridgePopulation {
                estimate_population_mean(data, &weight, lambda, opts.rho)?
            } else {
                estimate_bridge(data, &weight, lambda, opts.rho)?
            };
            MethodReport {
                outcome: EstimatorOutcome {
                    estimate: res.gamma_hat,
                    sigma2_hat: Some(res.sigma2_hat),
                    ci: Some(res.ci),
                    lambda: Some(res.lambda),
                },
                json: res.to_json(),
                theta: Some(res.theta),
            }
        }
        None => {
            let plain = EstimatorOptions {
                holdout_pre: 0,
                ..opts.clone()
            };
            let outcome = run_estimator(kind, data, &plain, 1)?;
            MethodReport {
                json: serde_json::json!({
                    "gamma_hat": outcome.estimate,
                    "sigma2_hat": outcome.sigma2_hat,
                    "ci": outcome.ci.map(|c| [c.0, c.1]),
                }),
                outcome,
                theta: None,
            }
        }
    };
    report.json["method"] = serde_json::json!(kind.name());
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub dgp: DgpSpec,
    pub estimators: Vec<EstimatorKind>,
    pub replications: usize,
    pub master_seed: u64,
    /// Sample sizes to sweep; empty means the DGP's own `n_units`.
    #[serde(default)]
    pub n_units_sweep: Vec<usize>,
    #[serde(default)]
    pub target: TargetMode,
    #[serde(default, flatten)]
    pub options: EstimatorOptions,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::InvalidConfig(
                "replications must be at least 1".into(),
            ));
        }
        if self.estimators.is_empty() {
            return Err(Error::InvalidConfig("no estimators requested".into()));
        }
        if !(self.options.rho > 0.0 && self.options.rho < 1.0) {
            return Err(Error::InvalidConfig("rho must lie in (0, 1)".into()));
        }
        if self.n_units_sweep.contains(&0) {
            return Err(Error::InvalidConfig("sample sizes must be positive".into()));
        }
        self.options.lambda.value(1)?;
        self.dgp.validate()
    }

    pub fn sweep(&self) -> Vec<usize> {
        if self.n_units_sweep.is_empty() {
            vec![self.dgp.n_units()]
        } else {
            self.n_units_sweep.clone()
        }
    }
}

/// Seed of replication `rep`.
pub fn sub_seed(master_seed: u64, rep: u64) -> u64 {
    mix(master_seed, rep)
}

/// One estimator's result in one replication.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepRecord {
    pub rep: u64,
    pub n_units: usize,
    pub estimator: EstimatorKind,
    pub target: f64,
    pub outcome: Option<EstimatorOutcome>,
    pub error: Option<String>,
}

impl RepRecord {
    pub fn error_value(&self) -> Option<f64> {
        self.outcome.map(|o| o.estimate - self.target)
    }
}

fn target_value(truth: &GroundTruth, kind: EstimatorKind, mode: TargetMode) -> f64 {
    match (kind.targets_population_mean(), mode) {
        (false, TargetMode::Sample) => truth.gamma_true_sample,
        (false, TargetMode::Population) => truth.gamma_true_population,
        (true, TargetMode::Sample) => truth.mean_y0_sample,
        (true, TargetMode::Population) => truth.mean_y0_population,
    }
}

/// Simulates replication `rep` at sample size `n_units` and runs every
/// configured estimator on it.
pub fn run_replication(cfg: &ScenarioConfig, n_units: usize, rep: u64) -> Vec<RepRecord> {
    let dgp = cfg.dgp.with_n_units(n_units);
    let seed = sub_seed(cfg.master_seed, rep);
    let sim = dgp.simulate(seed);
    cfg.estimators
        .iter()
        .map(|&kind| match &sim {
            Ok((data, truth)) => {
                let target = target_value(truth, kind, cfg.target);
                match run_estimator(kind, data, &cfg.options, dgp.n_factors()) {
                    Ok(o) if o.estimate.is_finite() => RepRecord {
                        rep,
                        n_units,
                        estimator: kind,
                        target,
                        outcome: Some(o),
                        error: None,
                    },
                    Ok(_) => RepRecord {
                        rep,
                        n_units,
                        estimator: kind,
                        target,
                        outcome: None,
                        error: Some("non-finite estimate".into()),
                    },
                    Err(e) => RepRecord {
                        rep,
                        n_units,
                        estimator: kind,
                        target,
                        outcome: None,
                        error: Some(e.to_string()),
                    },
                }
            }
            Err(e) => RepRecord {
                rep,
                n_units,
                estimator: kind,
                target: f64::NAN,
                outcome: None,
                error: Some(format!("simulation failed: {e}")),
            },
        })
        .collect()
}

/// Aggregate metrics of one estimator at one sample size.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McSummary {
    pub n_units: usize,
    pub estimator: EstimatorKind,
    pub n_ok: usize,
    pub failures: usize,
    pub bias: f64,
    /// Standard deviation of the errors.
    pub sd: f64,
    /// `sd / sqrt(n_ok)`.
    pub mc_se: f64,
    pub rmse: f64,
    /// Share of intervals containing the target; `None` without intervals.
    pub coverage: Option<f64>,
    pub mean_ci_width: Option<f64>,
    pub mean_lambda: Option<f64>,
    /// Replications whose standard error is negligible, below
    /// `1e-10 * max(1, |estimate|)`.
    pub degenerate_ci: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub config_hash: String,
    pub master_seed: u64,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McReport {
    pub provenance: Provenance,
    pub summaries: Vec<McSummary>,
    /// Per-replication records ordered by sample size, replication and
    /// estimator.
    pub records: Vec<RepRecord>,
}

impl McReport {
    pub fn summary(&self, n_units: usize, estimator: EstimatorKind) -> Option<&McSummary> {
        self.summaries
            .iter()
            .find(|s| s.n_units == n_units && s.estimator == estimator)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn summarize(n_units: usize, estimator: EstimatorKind, records: &[&RepRecord]) -> McSummary {
    let ok: Vec<(&RepRecord, EstimatorOutcome)> = records
        .iter()
        .filter_map(|r| r.outcome.map(|o| (*r, o)))
        .collect();
    let errs: Vec<f64> = ok.iter().map(|(r, o)| o.estimate - r.target).collect();
    let n_ok = errs.len();
    let (bias, sd, rmse) = if n_ok == 0 {
        (f64::NAN, f64::NAN, f64::NAN)
    } else {
        let b = mean(&errs);
        let var = if n_ok > 1 {
            errs.iter().map(|e| (e - b).powi(2)).sum::<f64>() / (n_ok - 1) as f64
        } else {
            0.0
        };
        (
            b,
            var.sqrt(),
            mean(&errs.iter().map(|e| e * e).collect::<Vec<_>>()).sqrt(),
        )
    };
    let with_ci: Vec<(f64, (f64, f64), bool)> = ok
        .iter()
        .filter_map(|(r, o)| {
            o.ci.map(|ci| {
                let se = o.sigma2_hat.unwrap_or(f64::NAN).sqrt();
                (r.target, ci, se <= 1e-10 * o.estimate.abs().max(1.0))
            })
        })
        .collect();
    let (coverage, width, degenerate) = if with_ci.is_empty() {
        (None, None, 0)
    } else {
        let hits = with_ci
            .iter()
            .filter(|(t, ci, _)| ci.0 <= *t && *t <= ci.1)
            .count();
        let widths: Vec<f64> = with_ci.iter().map(|(_, ci, _)| ci.1 - ci.0).collect();
        let degenerate = with_ci.iter().filter(|(_, _, d)| *d).count();
        (
            Some(hits as f64 / with_ci.len() as f64),
            Some(mean(&widths)),
            degenerate,
        )
    };
    let lambdas: Vec<f64> = ok.iter().filter_map(|(_, o)| o.lambda).collect();
    McSummary {
        n_units,
        estimator,
        n_ok,
        failures: records.len() - n_ok,
        bias,
        sd,
        mc_se: if n_ok > 0 {
            sd / (n_ok as f64).sqrt()
        } else {
            f64::NAN
        },
        rmse,
        coverage,
        mean_ci_width: width,
        mean_lambda: if lambdas.is_empty() {
            None
        } else {
            Some(mean(&lambdas))
        },
        degenerate_ci: degenerate,
    }
}

fn assemble(cfg: &ScenarioConfig, records: Vec<RepRecord>) -> Result<McReport> {
    if records.iter().all(|r| r.outcome.is_none()) {
        return Err(Error::AllReplicationsFailed);
    }
    let mut summaries = Vec::new();
    for n in cfg.sweep() {
        for &kind in &cfg.estimators {
            let rs: Vec<&RepRecord> = records
                .iter()
                .filter(|r| r.n_units == n && r.estimator == kind)
                .collect();
            summaries.push(summarize(n, kind, &rs));
        }
    }
    Ok(McReport {
        provenance: Provenance {
            config_hash: config_hash(cfg),
            master_seed: cfg.master_seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
        summaries,
        records,
    })
}

/// Runs all replications in parallel. The result is identical to
/// [`run_scenario_serial`].
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<McReport> {
    cfg.validate()?;
    cfg.dgp.warm()?;
    let jobs: Vec<(usize, u64)> = cfg
        .sweep()
        .into_iter()
        .flat_map(|n| (0..cfg.replications as u64).map(move |r| (n, r)))
        .collect();
    let records: Vec<RepRecord> = jobs
        .par_iter()
        .map(|&(n, r)| run_replication(cfg, n, r))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    assemble(cfg, records)
}

pub fn run_scenario_serial(cfg: &ScenarioConfig) -> Result<McReport> {
    cfg.validate()?;
    let mut records = Vec::new();
    for n in cfg.sweep() {
        for r in 0..cfg.replications as u64 {
            records.extend(run_replication(cfg, n, r));
        }
    }
    assemble(cfg, records)
}

/// Half-width of the acceptance band for empirical coverage:
/// three binomial standard errors.
pub fn coverage_band(rho: f64, replications: usize) -> f64 {
    3.0 * (rho * (1.0 - rho) / replications as f64).sqrt()
}

pub fn coverage_within_band(coverage: f64, rho: f64, replications: usize) -> bool {
    (coverage - (1.0 - rho)).abs() <= coverage_band(rho, replications)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageRow {
    pub n_units: usize,
    pub estimator: EstimatorKind,
    pub coverage: f64,
    pub band: f64,
    pub pass: bool,
}

/// Compares each estimator's coverage with `1 - rho`. Estimators without
/// intervals are omitted.
pub fn coverage_summary(report: &McReport, rho: f64) -> Vec<CoverageRow> {
    report
        .summaries
        .iter()
        .filter_map(|s| {
            s.coverage.map(|c| {
                let band = coverage_band(rho, s.n_ok);
                CoverageRow {
                    n_units: s.n_units,
                    estimator: s.estimator,
                    coverage: c,
                    band,
                    pass: coverage_within_band(c, rho, s.n_ok),
                }
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the summaries as CSV preceded by a provenance comment.
pub fn write_report<W: Write>(out: W, report: &McReport) -> Result<()> {
    let mut out = out;
    let p = &report.provenance;
    writeln!(
        out,
        "# config_hash={} master_seed={} version={}",
        p.config_hash, p.master_seed, p.version
    )?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "n_units",
        "estimator",
        "n_ok",
        "failures",
        "bias",
        "mc_se",
        "rmse",
        "sd",
        "coverage",
        "mean_ci_width",
        "mean_lambda",
        "degenerate_ci",
    ])
    .map_err(csv_err)?;
    for s in &report.summaries {
        w.write_record([
            s.n_units.to_string(),
            s.estimator.name().to_string(),
            s.n_ok.to_string(),
            s.failures.to_string(),
            s.bias.to_string(),
            s.mc_se.to_string(),
            s.rmse.to_string(),
            s.sd.to_string(),
            opt(s.coverage),
            opt(s.mean_ci_width),
            opt(s.mean_lambda),
            s.degenerate_ci.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_report_csv(path: impl AsRef<std::path::Path>, report: &McReport) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_report(std::io::BufWriter::new(f), report)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            record: 0,
            message: format!("{other:?}"),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{NoiseSpec, SelectionKind, SelectionModel, TreatmentEffect};

    fn twfe(sigma: f64) -> DgpSpec {
        DgpSpec::Twfe(TwfeConfig {
            n_units: 60,
            n_pre: 3,
            n_post: 2,
            unit_effect_mean: 1.0,
            unit_effect_var: 1.0,
            time_effects: vec![0.0, 0.5, 1.0, -0.5, 0.2, 0.3],
            noise: NoiseSpec::iid(sigma),
            selection: SelectionModel {
                kind: SelectionKind::Logistic,
                coef_u: vec![0.5],
                ..SelectionModel::randomized(0.4)
            },
            treatment_effect: TreatmentEffect::Constant(2.0),
        })
    }

    fn scenario(sigma: f64, estimators: Vec<EstimatorKind>, reps: usize) -> ScenarioConfig {
        ScenarioConfig {
            dgp: twfe(sigma),
            estimators,
            replications: reps,
            master_seed: 11,
            n_units_sweep: vec![],
            target: TargetMode::Sample,
            options: EstimatorOptions::default(),
        }
    }

    #[test]
    fn noiseless_did_is_exact_and_flagged() {
        let rep = run_scenario(&scenario(0.0, vec![EstimatorKind::Did], 1)).unwrap();
        let s = &rep.summaries[0];
        assert!(s.bias.abs() < 1e-10);
        assert_eq!(s.degenerate_ci, 1);
    }

    #[test]
    fn parallel_matches_serial() {
        let cfg = scenario(
            1.0,
            vec![EstimatorKind::Did, EstimatorKind::BridgeIdentity],
            6,
        );
        assert_eq!(
            run_scenario(&cfg).unwrap(),
            run_scenario_serial(&cfg).unwrap()
        );
    }

    #[test]
    fn failures_are_recorded() {
        let mut cfg = scenario(1.0, vec![EstimatorKind::Vertical, EstimatorKind::Did], 2);
        cfg.options.holdout_pre = 0;
        let rep = run_scenario(&cfg).unwrap();
        // T0 = 3 is far below N0, so the vertical fit uses the flagged
        // ridge and still succeeds; bridge_extra_pre without holdout fails.
        assert_eq!(rep.summaries[0].failures, 0);
        let cfg = scenario(
            1.0,
            vec![EstimatorKind::BridgeExtraPre, EstimatorKind::Did],
            2,
        );
        let rep = run_scenario(&cfg).unwrap();
        assert_eq!(rep.summaries[0].failures, 2);
        assert_eq!(rep.summaries[1].failures, 0);
    }

    #[test]
    fn coverage_band_arithmetic() {
        assert!((coverage_band(0.05, 1000) - 0.0207).abs() < 1e-4);
        assert!(coverage_within_band(0.948, 0.05, 1000));
        assert!(!coverage_within_band(0.80, 0.05, 1000));
    }

    #[test]
    fn zero_replications_rejected() {
        assert!(matches!(
            run_scenario(&scenario(1.0, vec![EstimatorKind::Did], 0)),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn estimator_names_round_trip() {
        for k in EstimatorKind::ALL {
            assert_eq!(EstimatorKind::parse(k.name()), Some(k));
        }
    }
}
