//! Command-line front end: simulate panels, classify markets, and run the
//! difference-in-differences, structural, and synthetic-GMM estimators.
//!
//! Every command reads a JSON configuration (unknown keys are rejected),
//! writes its outputs as JSON files under `--out`, and echoes the fully
//! resolved configuration to `resolved_config.json` there. Outputs are
//! byte-identical across runs with the same inputs and seed.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 estimation
//! failure, 4 weight-solver failure, 5 bootstrap failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use mergeretro::did::{
    aggregate_event_study_report, did_first_difference_event_study, did_fixed_effects,
    did_with_trends, percent_transform, DidSpec, Differencing, TrendMode,
};
use mergeretro::error::Error;
use mergeretro::estimator::{estimate_structural, StructuralSpec};
use mergeretro::panel::{classify_markets, load_panel, load_presence, save_panel, LoadSchema};
use mergeretro::sgmm::{
    delta_lambda_with_bootstrap, estimate_synthetic_gmm, sdid_treatment_effect,
    sdid_with_bootstrap, BootstrapConfig,
};
use mergeretro::sim::{run_monte_carlo_parallel, simulate_panel, truth_value, DgpConfig};

#[derive(Parser)]
#[command(
    name = "mergeretro",
    about = "Panel econometrics for merger retrospectives",
    version
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// JSON configuration file for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Random seed for simulation and Monte Carlo commands.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for Monte Carlo replications.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one panel from the structural model and write it as CSV.
    Simulate,
    /// Classify markets as treated/control/excluded from a presence table.
    Classify,
    /// Difference-in-differences estimators.
    Did,
    /// Structural (conduct + efficiency) estimation.
    Structural,
    /// Synthetic-control weighted structural estimation.
    Sgmm,
    /// Monte Carlo study of an estimator against simulator ground truth.
    Montecarlo,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Validation(_) | Error::Config(_) | Error::Io(_) | Error::Csv(_) | Error::Json(_) => 2,
        Error::RankDeficient { .. } | Error::OrderCondition(_) | Error::SingularDenominator(_) => 3,
        Error::NonConvergence(_) => 4,
        Error::BootstrapAttrition { .. } => 5,
    }
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), Error> {
    fs::create_dir_all(&cli.global.out)?;
    match cli.command {
        Command::Simulate => cmd_simulate(&cli.global),
        Command::Classify => cmd_classify(&cli.global),
        Command::Did => cmd_did(&cli.global),
        Command::Structural => cmd_structural(&cli.global),
        Command::Sgmm => cmd_sgmm(&cli.global),
        Command::Montecarlo => cmd_montecarlo(&cli.global),
    }
}

fn read_config<T: for<'de> Deserialize<'de>>(global: &GlobalArgs) -> Result<T, Error> {
    let path = global.config.as_ref().ok_or_else(|| {
        Error::Config("this command requires --config <file.json>".into())
    })?;
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Write pretty JSON with a trailing newline.
fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(dir.join(name), text)?;
    Ok(())
}

fn echo_resolved<T: Serialize>(global: &GlobalArgs, config: &T) -> Result<(), Error> {
    write_json(
        &global.out,
        "resolved_config.json",
        &json!({
            "config": config,
            "out": global.out,
            "seed": global.seed,
            "threads": global.threads,
        }),
    )
}

/// Shared panel-input block: a CSV path plus the treatment window.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PanelInput {
    panel_csv: PathBuf,
    merger_quarter: i64,
    #[serde(default = "default_window")]
    pre_window: u32,
    #[serde(default = "default_window")]
    post_window: u32,
}

fn default_window() -> u32 {
    8
}

impl PanelInput {
    fn load(&self) -> Result<mergeretro::panel::PanelDataset, Error> {
        load_panel(
            &self.panel_csv,
            &LoadSchema {
                merger_quarter: self.merger_quarter,
                pre_window: self.pre_window,
                post_window: self.post_window,
            },
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateConfig {
    #[serde(default = "DgpConfig::default_calibration")]
    dgp: DgpConfig,
}

fn cmd_simulate(global: &GlobalArgs) -> Result<(), Error> {
    let cfg: SimulateConfig = match &global.config {
        Some(_) => read_config(global)?,
        None => SimulateConfig {
            dgp: DgpConfig::default_calibration(),
        },
    };
    echo_resolved(global, &cfg)?;
    let data = simulate_panel(&cfg.dgp, global.seed)?;
    save_panel(&data, global.out.join("panel.csv"))?;
    write_json(&global.out, "truth.json", &data.metadata)?;
    println!("wrote {} observations", data.n_obs());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassifyConfig {
    presence_csv: PathBuf,
    merging: [String; 2],
}

fn cmd_classify(global: &GlobalArgs) -> Result<(), Error> {
    let cfg: ClassifyConfig = read_config(global)?;
    echo_resolved(global, &cfg)?;
    let table = load_presence(&cfg.presence_csv)?;
    let classes = classify_markets(&table, (&cfg.merging[0], &cfg.merging[1]))?;
    write_json(&global.out, "classification.json", &classes)?;
    println!("classified {} markets", classes.len());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DidConfig {
    panel: PanelInput,
    spec: DidSpec,
}

fn cmd_did(global: &GlobalArgs) -> Result<(), Error> {
    let cfg: DidConfig = read_config(global)?;
    echo_resolved(global, &cfg)?;
    let data = cfg.panel.load()?;
    let report = match (cfg.spec.differencing, cfg.spec.trend_mode) {
        (Differencing::FirstDifference, _) => did_first_difference_event_study(&data, &cfg.spec)?,
        (Differencing::FixedEffects, TrendMode::None) => did_fixed_effects(&data, &cfg.spec)?,
        (Differencing::FixedEffects, _) => did_with_trends(&data, &cfg.spec)?,
    };
    let mut out = json!({ "report": report });
    if cfg.spec.differencing == Differencing::FirstDifference {
        // Aggregate the event-path coefficients into one average percent
        // effect with linearly declining weights.
        let (estimate, se) = aggregate_event_study_report(&report, cfg.spec.event_horizon)?;
        out["aggregate"] = json!({
            "average_effect": estimate,
            "se": se,
            "percent_scale": cfg.spec.outcome.log,
        });
    } else if cfg.spec.outcome.log {
        let beta = report.coefficient("beta_did")?;
        out["percent_effect"] = json!(percent_transform(beta));
    }
    write_json(&global.out, "did.json", &out)?;
    println!("{}", report.to_text_table("difference-in-differences"));
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StructuralConfig {
    panel: PanelInput,
    #[serde(default)]
    spec: StructuralSpec,
}

fn cmd_structural(global: &GlobalArgs) -> Result<(), Error> {
    let cfg: StructuralConfig = read_config(global)?;
    echo_resolved(global, &cfg)?;
    let data = cfg.panel.load()?;
    let est = estimate_structural(&data, &cfg.spec)?;
    write_json(&global.out, "structural.json", &est)?;
    println!("{}", est.demand.to_text_table("demand"));
    println!("{}", est.supply.to_text_table("price equation"));
    println!(
        "delta_lambda = {:.4} (se {:.4}), avg efficiency = {:.4} (se {:.4}), price effect = {:.4} (se {:.4})",
        est.delta_lambda,
        est.delta_lambda_se,
        est.average_efficiency,
        est.average_efficiency_se,
        est.efficiency_price_effect,
        est.efficiency_price_effect_se,
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SgmmConfig {
    panel: PanelInput,
    #[serde(default)]
    spec: StructuralSpec,
    /// Ridge scale for the market weights; omitted = data-driven.
    #[serde(default)]
    zeta: Option<f64>,
    /// Optional block bootstrap for the conduct change and the synthetic-DiD
    /// effect.
    #[serde(default)]
    bootstrap: Option<BootstrapConfig>,
}

fn cmd_sgmm(global: &GlobalArgs) -> Result<(), Error> {
    let cfg: SgmmConfig = read_config(global)?;
    echo_resolved(global, &cfg)?;
    let data = cfg.panel.load()?;
    let est = estimate_synthetic_gmm(&data, &cfg.spec, cfg.zeta)?;
    let sdid = sdid_treatment_effect(&data, cfg.zeta)?;
    let mut out = json!({
        "weights": est.weights,
        "structural": est.structural,
        "sdid_effect": sdid,
    });
    if let Some(bs) = &cfg.bootstrap {
        out["delta_lambda_bootstrap"] =
            serde_json::to_value(delta_lambda_with_bootstrap(&data, &cfg.spec, cfg.zeta, bs)?)?;
        out["sdid_bootstrap"] = serde_json::to_value(sdid_with_bootstrap(&data, cfg.zeta, bs)?)?;
    }
    write_json(&global.out, "sgmm.json", &out)?;
    println!(
        "delta_lambda = {:.4}, sdid effect = {:.4}, zeta = {:.4}",
        est.structural.delta_lambda, sdid, est.weights.zeta
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum McStatistic {
    /// Conduct change from the unweighted structural estimator.
    DeltaLambda,
    /// Conduct change from the synthetic-control weighted estimator.
    SgmmDeltaLambda,
    /// Two-way fixed-effects DiD coefficient on the price level.
    FeDidPrice,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MonteCarloConfig {
    #[serde(default = "DgpConfig::default_calibration")]
    dgp: DgpConfig,
    #[serde(default = "default_replications")]
    replications: usize,
    statistic: McStatistic,
    #[serde(default)]
    spec: StructuralSpec,
    #[serde(default)]
    zeta: Option<f64>,
}

fn default_replications() -> usize {
    50
}

fn cmd_montecarlo(global: &GlobalArgs) -> Result<(), Error> {
    let cfg: MonteCarloConfig = read_config(global)?;
    echo_resolved(global, &cfg)?;
    let stat = |d: &mergeretro::panel::PanelDataset| -> Result<(f64, f64), Error> {
        match cfg.statistic {
            McStatistic::DeltaLambda => {
                let e = estimate_structural(d, &cfg.spec)?;
                Ok((e.delta_lambda, e.delta_lambda_se))
            }
            McStatistic::SgmmDeltaLambda => {
                let e = estimate_synthetic_gmm(d, &cfg.spec, cfg.zeta)?;
                Ok((e.structural.delta_lambda, e.structural.delta_lambda_se))
            }
            McStatistic::FeDidPrice => {
                let spec = DidSpec::fixed_effects(
                    mergeretro::did::OutcomeSpec::level_price(),
                );
                let r = did_fixed_effects(d, &spec)?;
                Ok((r.coefficient("beta_did")?, r.se_of("beta_did")?))
            }
        }
    };
    let result = run_monte_carlo_parallel(
        &cfg.dgp,
        cfg.replications,
        global.seed,
        global.threads,
        stat,
    )?;
    // One extra draw to read the ground truth from metadata.
    let reference = simulate_panel(&cfg.dgp, global.seed)?;
    let truth = match cfg.statistic {
        McStatistic::DeltaLambda | McStatistic::SgmmDeltaLambda => {
            truth_value(&reference, "delta_lambda")?
        }
        McStatistic::FeDidPrice => truth_value(&reference, "efficiency_price_effect")?,
    };
    let out = json!({
        "result": result,
        "truth": truth,
        "bias": result.mean - truth,
    });
    write_json(&global.out, "montecarlo.json", &out)?;
    println!(
        "mean = {:.4}, sd = {:.4}, mean_se = {:.4}, truth = {:.4}, failed = {}",
        result.mean, result.sd, result.mean_se, truth, result.n_failed
    );
    Ok(())
}
