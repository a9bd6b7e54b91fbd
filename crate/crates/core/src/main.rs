use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::json;

use minbridge::bridge::LambdaRule;
use minbridge::dgp::config_hash;
use minbridge::harness::{
    coverage_summary, estimate_method, run_scenario, write_report_csv, DgpSpec, EstimatorKind,
    EstimatorOptions, ScenarioConfig,
};
use minbridge::oracle::{identification_check, tv_rank_matrix};
use minbridge::panel::{load_panel_csv, validate_panel, write_panel_csv, CsvSchema};
use minbridge::{Error, Result};

#[derive(Parser)]
#[command(
    name = "minbridge",
    version,
    about = "Counterfactual means for panels with latent confounders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic panel and write it as long CSV.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the counterfactual mean from a long CSV panel.
    Estimate {
        #[arg(long)]
        data: PathBuf,
        /// One of did, horizontal, vertical, factor4step, bridge_identity,
        /// bridge_two_stage, bridge_population.
        #[arg(long, default_value = "bridge_two_stage")]
        method: String,
        #[arg(long, default_value_t = 1.0)]
        lambda_c: f64,
        #[arg(long, default_value_t = 0.75)]
        lambda_beta: f64,
        #[arg(long, default_value_t = 0.05)]
        rho: f64,
        /// Rank for factor4step.
        #[arg(long, default_value_t = 1)]
        rank: usize,
        /// Ridge penalty for the horizontal regression.
        #[arg(long, default_value_t = 0.0)]
        ridge: f64,
    },
    /// Run a Monte Carlo scenario and write the summary CSV.
    Mc {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print identification diagnostics for a DGP configuration.
    OracleCheck {
        #[arg(long)]
        config: PathBuf,
    },
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    let is_json = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))
    } else {
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v).expect("json value serializes");
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn simulate(config: &Path, seed: u64, out: &Path) -> Result<()> {
    let dgp: DgpSpec = read_config(config)?;
    let (data, _) = dgp.simulate(seed)?;
    let comments = vec![format!("config_hash={} seed={seed}", config_hash(&dgp))];
    write_panel_csv(out, &data, &comments)
}

fn estimate(
    data: &Path,
    method: &str,
    c: f64,
    beta: f64,
    rho: f64,
    rank: usize,
    ridge: f64,
) -> Result<()> {
    let kind = EstimatorKind::parse(method)
        .filter(|k| *k != EstimatorKind::BridgeExtraPre)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown method {method:?}")))?;
    let panel = load_panel_csv(data, &CsvSchema::default())?;
    let report = validate_panel(&panel);
    if !report.is_ok() {
        return Err(Error::InvalidConfig(format!(
            "panel failed validation: {:?}",
            report.issues
        )));
    }
    let opts = EstimatorOptions {
        lambda: LambdaRule { c, beta },
        rho,
        ridge,
        factor_rank: Some(rank),
        holdout_pre: 0,
    };
    let report = estimate_method(kind, &panel, &opts)?;
    print_json(&report.json)
}

fn mc(scenario: &Path, out: &Path) -> Result<()> {
    let cfg: ScenarioConfig = read_config(scenario)?;
    let report = run_scenario(&cfg)?;
    write_report_csv(out, &report)?;
    for row in coverage_summary(&report, cfg.options.rho) {
        eprintln!(
            "n={} {}: coverage {:.3} (band +/-{:.3}) {}",
            row.n_units,
            row.estimator.name(),
            row.coverage,
            row.band,
            if row.pass { "ok" } else { "outside band" }
        );
    }
    Ok(())
}

fn oracle_check(config: &Path) -> Result<()> {
    let dgp: DgpSpec = read_config(config)?;
    let out = match &dgp {
        DgpSpec::Factor(c) => {
            serde_json::to_value(identification_check(c)?).expect("report serializes")
        }
        DgpSpec::Twfe(c) => {
            serde_json::to_value(identification_check(&c.to_factor()?)?).expect("report serializes")
        }
        DgpSpec::Ar(c) => {
            let tv = tv_rank_matrix(c, false)?;
            json!({
                "rank_matrix_rank": tv.rank_matrix_rank,
                "post_rank": tv.post_rank,
                "identified": tv.identified,
            })
        }
    };
    print_json(&out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Simulate { config, seed, out } => simulate(&config, seed, &out),
        Command::Estimate {
            data,
            method,
            lambda_c,
            lambda_beta,
            rho,
            rank,
            ridge,
        } => estimate(&data, &method, lambda_c, lambda_beta, rho, rank, ridge),
        Command::Mc { scenario, out } => mc(&scenario, &out),
        Command::OracleCheck { config } => oracle_check(&config),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
