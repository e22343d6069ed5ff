//! Command-line surface: dataset estimation, simulation-study reproduction,
//! and sensitivity sweeps, driven by a TOML configuration with flag
//! overrides (flags win).
//!
//! Exit codes: 0 success, 2 validation failure (config, dataset, preset),
//! 3 estimation failure (separation, singularities, unstable resampling).

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data_model::{
    validate_dataset, HarmonizedDataset, ObsDesign, RctDesign, SamplingDesign,
};
use crate::estimators::{
    BiasSpecification, EstimatorKind, PipelineOptions, TransportPipeline,
};
use crate::inference::{
    bootstrap_pipeline, eif_variance_report, sandwich_variance, wald_interval_ve, PiBlockMode,
    VarianceReport,
};
use crate::report::{
    emit_effect_estimates, emit_metrics, emit_plot_data, emit_raw_replicates,
    emit_sensitivity_grid, emit_sensitivity_report, ReportFormat,
};
use crate::sensitivity::{sweep_grid, SweepVariance};
use crate::simulation::{
    aggregate_metrics, preset, preset_names, run_replicates, true_parameters, NormalLaw,
    SampledPerArm, ScenarioSpec, VariancePlan,
};

/// Fallback environment variable for `--threads`.
pub const THREADS_ENV: &str = "SURROGATE_BRIDGE_THREADS";

const DEFAULT_BOOTSTRAP_REPS: usize = 500;
const DEFAULT_LEVEL: f64 = 0.95;
const DEFAULT_THRESHOLD: f64 = 0.3;
const DEFAULT_TRUTH_DRAWS: usize = 4_000_000;

/// Errors mapped to process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Exit code 2: bad configuration, dataset, or preset.
    Validation(String),
    /// Exit code 3: the estimation itself failed.
    Estimation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Estimation(_) => 3,
        }
    }
    pub fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Estimation(m) => m,
        }
    }
}

fn validation<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Validation(e.to_string())
}

fn estimation<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Estimation(e.to_string())
}

#[derive(Parser, Debug)]
#[command(
    name = "surrogate-bridge",
    version,
    about = "Transported surrogate-endpoint estimation of treatment efficacy with conservative sensitivity analysis"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Estimate treatment efficacy from a harmonized two-study CSV.
    Estimate {
        /// Input CSV (overrides the config file's `estimate.input`).
        input: Option<PathBuf>,
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Reproduce a simulation study scenario.
    Simulate {
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Sweep a bias grid into ignorance/uncertainty intervals.
    Sensitivity {
        /// Input CSV (overrides the config file's `sensitivity.input`).
        input: Option<PathBuf>,
        #[command(flatten)]
        common: CommonFlags,
    },
    /// List the built-in scenario presets.
    Presets,
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonFlags {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Scenario preset name (simulate).
    #[arg(long)]
    pub preset: Option<String>,
    /// Estimator choice.
    #[arg(long, value_enum)]
    pub estimator: Option<EstimatorFlag>,
    /// Variance machinery.
    #[arg(long, value_enum)]
    pub variance: Option<VarianceFlag>,
    /// Bootstrap replicate count.
    #[arg(long)]
    pub b: Option<usize>,
    /// Monte Carlo replicate count (simulate).
    #[arg(long)]
    pub reps: Option<usize>,
    /// Phase 3 sampled-per-arm override (simulate).
    #[arg(long)]
    pub sampled: Option<usize>,
    /// Base seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores); falls back to SURROGATE_BRIDGE_THREADS.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Success threshold on the VE scale.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimatorFlag {
    #[value(name = "plug-in")]
    PlugIn,
    #[value(name = "one-step")]
    OneStep,
}

impl From<EstimatorFlag> for EstimatorKind {
    fn from(f: EstimatorFlag) -> Self {
        match f {
            EstimatorFlag::PlugIn => EstimatorKind::PlugIn,
            EstimatorFlag::OneStep => EstimatorKind::OneStep,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarianceFlag {
    /// Stacked-estimating-equation sandwich (plug-in estimator).
    Sandwich,
    /// Stratified bootstrap.
    Bootstrap,
    /// Analytic plus bootstrap.
    Both,
    /// Projected-EIF variance (one-step estimator).
    Eif,
}

// ---------------------------------------------------------------------------
// Config file sections.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub run: RunSection,
    pub estimate: Option<EstimateSection>,
    pub simulate: Option<SimulateSection>,
    pub sensitivity: Option<SensitivitySection>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub estimator: Option<String>,
    pub variance: Option<String>,
    pub b: Option<usize>,
    pub level: Option<f64>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub threshold: Option<f64>,
    /// Monte Carlo draws for the scenario-truth oracle.
    pub truth_draws: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateSection {
    pub input: Option<PathBuf>,
    pub t0: Option<f64>,
    pub u_uc: Option<f64>,
    pub u_ct: Option<f64>,
    pub design: Option<DesignSection>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSection {
    /// "case-control" or "complete".
    pub obs: Option<String>,
    pub control_ratio: Option<u32>,
    /// "srs" or "complete".
    pub rct: Option<String>,
    pub sampled_per_arm: Option<[usize; 2]>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub preset: Option<String>,
    pub replicates: Option<usize>,
    pub sampled: Option<usize>,
    pub scenario: Option<ScenarioSection>,
}

/// Inline scenario description (all fields optional; defaults match the base
/// study configuration).
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub name: Option<String>,
    pub n_obs: Option<usize>,
    pub n_rct_per_arm: Option<usize>,
    pub x1_prob: Option<f64>,
    pub x2_range: Option<[f64; 2]>,
    pub s_control_mean: Option<f64>,
    pub s_control_variance: Option<f64>,
    pub s_vaccine_mean: Option<f64>,
    pub s_vaccine_variance: Option<f64>,
    pub outcome_coefficients: Option<[f64; 5]>,
    pub obs_control_ratio: Option<u32>,
    /// Omit for complete phase 3 measurement.
    pub sampled_per_arm: Option<usize>,
    pub u_uc: Option<f64>,
    pub u_ct: Option<f64>,
    pub replicates: Option<usize>,
    pub t0: Option<f64>,
    pub resample_on_zero_cases: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivitySection {
    pub input: Option<PathBuf>,
    pub t0: Option<f64>,
    /// Grid axes; the sweep evaluates the cross product.
    pub u_uc: Option<Vec<f64>>,
    pub u_ct: Option<Vec<f64>>,
    pub threshold: Option<f64>,
    pub design: Option<DesignSection>,
}

/// Fully merged run configuration (config file + flag overrides), echoed into
/// the run manifest so any result can be reproduced.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub estimator: String,
    pub variance: String,
    pub b: usize,
    pub level: f64,
    pub seed: u64,
    pub threads: usize,
    pub out: PathBuf,
    pub threshold: f64,
    pub truth_draws: usize,
    pub preset: Option<String>,
    pub input: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| validation(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str(&text)
                .map_err(|e| validation(format!("config {}: {e}", p.display())))
        }
    }
}

fn parse_estimator(name: &str) -> Result<EstimatorKind, CliError> {
    match name {
        "plug-in" | "plug_in" | "plugin" => Ok(EstimatorKind::PlugIn),
        "one-step" | "one_step" | "onestep" => Ok(EstimatorKind::OneStep),
        other => Err(validation(format!("unknown estimator '{other}'"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum VarianceChoice {
    Sandwich,
    Bootstrap,
    Both,
    Eif,
}

fn parse_variance(name: &str) -> Result<VarianceChoice, CliError> {
    match name {
        "sandwich" => Ok(VarianceChoice::Sandwich),
        "bootstrap" => Ok(VarianceChoice::Bootstrap),
        "both" => Ok(VarianceChoice::Both),
        "eif" => Ok(VarianceChoice::Eif),
        other => Err(validation(format!("unknown variance method '{other}'"))),
    }
}

impl From<VarianceFlag> for VarianceChoice {
    fn from(f: VarianceFlag) -> Self {
        match f {
            VarianceFlag::Sandwich => VarianceChoice::Sandwich,
            VarianceFlag::Bootstrap => VarianceChoice::Bootstrap,
            VarianceFlag::Both => VarianceChoice::Both,
            VarianceFlag::Eif => VarianceChoice::Eif,
        }
    }
}

/// Check the estimator/variance pairing: the sandwich describes the plug-in
/// estimator, the projected-EIF variance the one-step.
fn check_pairing(estimator: EstimatorKind, variance: VarianceChoice) -> Result<(), CliError> {
    match (estimator, variance) {
        (EstimatorKind::OneStep, VarianceChoice::Sandwich) => Err(validation(
            "variance 'sandwich' applies to the plug-in estimator; use 'eif' (or 'both') with one-step"
                .to_string(),
        )),
        (EstimatorKind::PlugIn, VarianceChoice::Eif) => Err(validation(
            "variance 'eif' applies to the one-step estimator; use 'sandwich' (or 'both') with plug-in"
                .to_string(),
        )),
        _ => Ok(()),
    }
}

struct Merged {
    cfg: FileConfig,
    run: RunConfig,
    estimator: EstimatorKind,
    variance: VarianceChoice,
}

fn merge(command: &str, flags: &CommonFlags) -> Result<Merged, CliError> {
    let cfg = load_config(flags.config.as_deref())?;
    let estimator = match flags.estimator {
        Some(f) => EstimatorKind::from(f),
        None => match cfg.run.estimator.as_deref() {
            Some(name) => parse_estimator(name)?,
            None => EstimatorKind::PlugIn,
        },
    };
    let variance = match flags.variance {
        Some(f) => VarianceChoice::from(f),
        None => match cfg.run.variance.as_deref() {
            Some(name) => parse_variance(name)?,
            None => match estimator {
                EstimatorKind::PlugIn => VarianceChoice::Sandwich,
                EstimatorKind::OneStep => VarianceChoice::Eif,
            },
        },
    };
    check_pairing(estimator, variance)?;
    let threads = flags
        .threads
        .or(cfg.run.threads)
        .or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()))
        .unwrap_or(0);
    let level = cfg.run.level.unwrap_or(DEFAULT_LEVEL);
    if !(level > 0.0 && level < 1.0) {
        return Err(validation(format!("confidence level {level} outside (0,1)")));
    }
    let run = RunConfig {
        command: command.to_string(),
        estimator: estimator.to_string(),
        variance: format!("{variance:?}").to_lowercase(),
        b: flags.b.or(cfg.run.b).unwrap_or(DEFAULT_BOOTSTRAP_REPS),
        level,
        seed: flags.seed.or(cfg.run.seed).unwrap_or(1),
        threads,
        out: flags
            .out
            .clone()
            .or_else(|| cfg.run.out.clone())
            .unwrap_or_else(|| PathBuf::from("out")),
        threshold: flags
            .threshold
            .or(cfg.run.threshold)
            .unwrap_or(DEFAULT_THRESHOLD),
        truth_draws: cfg.run.truth_draws.unwrap_or(DEFAULT_TRUTH_DRAWS),
        preset: flags.preset.clone(),
        input: None,
    };
    Ok(Merged {
        cfg,
        run,
        estimator,
        variance,
    })
}

fn configure_threads(threads: usize) {
    if threads > 0 {
        // Ignore failure: the global pool can only be configured once.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

fn ensure_out_dir(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out)
        .map_err(|e| validation(format!("cannot create output directory {}: {e}", out.display())))
}

fn write_manifest(run: &RunConfig, extra: serde_json::Value) -> Result<(), CliError> {
    let manifest = serde_json::json!({
        "tool": "surrogate-bridge",
        "version": env!("CARGO_PKG_VERSION"),
        "config": run,
        "details": extra,
    });
    let path = run.out.join("run_manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("serializable"))
        .map_err(|e| estimation(format!("cannot write {}: {e}", path.display())))
}

fn design_from_section(
    section: Option<&DesignSection>,
    dataset: &HarmonizedDataset,
) -> Result<SamplingDesign, CliError> {
    match section {
        None => SamplingDesign::infer(dataset).map_err(validation),
        Some(s) => {
            let obs = match s.obs.as_deref() {
                Some("complete") => ObsDesign::Complete,
                Some("case-control") | None => ObsDesign::CaseControl {
                    control_ratio: s.control_ratio.ok_or_else(|| {
                        validation("design.obs = \"case-control\" needs control_ratio")
                    })?,
                },
                Some(other) => {
                    return Err(validation(format!("unknown obs design '{other}'")));
                }
            };
            let rct = match s.rct.as_deref() {
                Some("complete") => RctDesign::Complete,
                Some("srs") | None => RctDesign::Srs {
                    sampled_per_arm: s.sampled_per_arm.ok_or_else(|| {
                        validation("design.rct = \"srs\" needs sampled_per_arm")
                    })?,
                },
                Some(other) => {
                    return Err(validation(format!("unknown rct design '{other}'")));
                }
            };
            Ok(SamplingDesign { obs, rct })
        }
    }
}

fn load_dataset(input: &Path, t0: f64) -> Result<HarmonizedDataset, CliError> {
    let dataset = HarmonizedDataset::read_csv_path(input, t0).map_err(validation)?;
    let report = validate_dataset(&dataset);
    if !report.passed() {
        let shown: Vec<String> = report.violations.iter().take(5).map(|v| v.to_string()).collect();
        return Err(validation(format!(
            "dataset {} failed validation with {} violation(s): {}",
            input.display(),
            report.violations.len(),
            shown.join("; ")
        )));
    }
    Ok(dataset)
}

fn scenario_from_config(
    merged: &Merged,
    flags: &CommonFlags,
) -> Result<ScenarioSpec, CliError> {
    let section = merged.cfg.simulate.clone().unwrap_or_default();
    let preset_name = flags.preset.clone().or(section.preset.clone());
    let mut spec = match (&preset_name, &section.scenario) {
        (Some(name), _) => preset(name).map_err(validation)?,
        (None, Some(inline)) => {
            let mut spec = preset("sim1-ve0-s500").map_err(validation)?;
            spec.name = inline.name.clone().unwrap_or_else(|| "inline".to_string());
            if let Some(v) = inline.n_obs {
                spec.n_obs = v;
            }
            if let Some(v) = inline.n_rct_per_arm {
                spec.n_rct_per_arm = v;
            }
            if let Some(v) = inline.x1_prob {
                spec.x1_prob = v;
            }
            if let Some(v) = inline.x2_range {
                spec.x2_range = (v[0], v[1]);
            }
            if let Some(v) = inline.s_control_mean {
                spec.s_law_control.mean = v;
            }
            if let Some(v) = inline.s_control_variance {
                spec.s_law_control.variance = v;
            }
            spec.s_law_vaccine = NormalLaw {
                mean: inline.s_vaccine_mean.unwrap_or(spec.s_law_control.mean),
                variance: inline
                    .s_vaccine_variance
                    .unwrap_or(spec.s_law_control.variance),
            };
            if let Some(v) = inline.outcome_coefficients {
                spec.outcome_coefficients = v;
            }
            if let Some(v) = inline.obs_control_ratio {
                spec.obs_control_ratio = v;
            }
            spec.rct_sampled_per_arm = match inline.sampled_per_arm {
                Some(c) => SampledPerArm::Count(c),
                None => SampledPerArm::All,
            };
            spec.analysis_bias = BiasSpecification {
                u_uc: inline.u_uc.unwrap_or(0.0),
                u_ct: inline.u_ct.unwrap_or(0.0),
            };
            if let Some(v) = inline.replicates {
                spec.replicates = v;
            }
            if let Some(v) = inline.t0 {
                spec.t0 = v;
            }
            if let Some(v) = inline.resample_on_zero_cases {
                spec.resample_on_zero_cases = v;
            }
            spec
        }
        (None, None) => {
            return Err(validation(
                "simulate needs --preset or a [simulate.scenario] section; see `surrogate-bridge presets`",
            ))
        }
    };
    if let Some(reps) = flags.reps.or(section.replicates) {
        spec.replicates = reps;
    }
    if let Some(sampled) = flags.sampled.or(section.sampled) {
        spec.rct_sampled_per_arm = SampledPerArm::Count(sampled);
    }
    spec.base_seed = merged.run.seed;
    spec.validate().map_err(validation)?;
    Ok(spec)
}

fn variance_plan(choice: VarianceChoice, b: usize) -> VariancePlan {
    match choice {
        VarianceChoice::Sandwich | VarianceChoice::Eif => VariancePlan::analytic_only(),
        VarianceChoice::Bootstrap => VariancePlan {
            analytic: false,
            bootstrap: Some(b),
        },
        VarianceChoice::Both => VariancePlan::both(b),
    }
}

fn run_estimate(input: Option<PathBuf>, flags: &CommonFlags) -> Result<(), CliError> {
    let mut merged = merge("estimate", flags)?;
    configure_threads(merged.run.threads);
    let section = merged.cfg.estimate.clone().unwrap_or_default();
    let input = input
        .or(section.input.clone())
        .ok_or_else(|| validation("estimate needs an input CSV (argument or [estimate].input)"))?;
    merged.run.input = Some(input.clone());
    let t0 = section.t0.unwrap_or(90.0);
    let dataset = load_dataset(&input, t0)?;
    let design = design_from_section(section.design.as_ref(), &dataset)?;
    let bias = BiasSpecification {
        u_uc: section.u_uc.unwrap_or(0.0),
        u_ct: section.u_ct.unwrap_or(0.0),
    };
    let pipeline = TransportPipeline::new(
        &dataset,
        &design,
        PipelineOptions {
            bias,
            estimator: merged.estimator,
            p_a1: 0.5,
        },
    )
    .map_err(estimation)?;
    let fit = pipeline.fit().map_err(estimation)?;
    let effect = fit.effect().clone();

    let mut reports: Vec<VarianceReport> = Vec::new();
    match merged.variance {
        VarianceChoice::Sandwich => {
            reports.push(sandwich_variance(&pipeline, &fit, PiBlockMode::Known).map_err(estimation)?);
        }
        VarianceChoice::Eif => {
            let projected = fit.projected_eif.as_ref().expect("one-step fit");
            reports.push(
                eif_variance_report(&projected[0], &projected[1], effect.theta0, effect.theta1)
                    .map_err(estimation)?,
            );
        }
        VarianceChoice::Bootstrap => {
            reports.push(
                bootstrap_pipeline(&pipeline, merged.run.b, merged.run.seed).map_err(estimation)?,
            );
        }
        VarianceChoice::Both => {
            match merged.estimator {
                EstimatorKind::PlugIn => reports.push(
                    sandwich_variance(&pipeline, &fit, PiBlockMode::Known).map_err(estimation)?,
                ),
                EstimatorKind::OneStep => {
                    let projected = fit.projected_eif.as_ref().expect("one-step fit");
                    reports.push(
                        eif_variance_report(
                            &projected[0],
                            &projected[1],
                            effect.theta0,
                            effect.theta1,
                        )
                        .map_err(estimation)?,
                    );
                }
            }
            reports.push(
                bootstrap_pipeline(&pipeline, merged.run.b, merged.run.seed).map_err(estimation)?,
            );
        }
    }
    let ve_ci = reports
        .first()
        .map(|r| wald_interval_ve(&effect, r.se_log_one_minus_ve, merged.run.level))
        .transpose()
        .map_err(estimation)?;

    ensure_out_dir(&merged.run.out)?;
    let path = merged.run.out.join("effect_estimates.csv");
    let mut file = fs::File::create(&path)
        .map_err(|e| estimation(format!("cannot write {}: {e}", path.display())))?;
    emit_effect_estimates(&mut file, &effect, &reports, ve_ci).map_err(estimation)?;
    write_manifest(
        &merged.run,
        serde_json::json!({
            "input": input,
            "t0": t0,
            "bias": { "u_uc": bias.u_uc, "u_ct": bias.u_ct },
            "n_records": dataset.records.len(),
        }),
    )?;
    println!(
        "estimate: theta0={:.6e} theta1={:.6e} ve={:.4} -> {}",
        effect.theta0,
        effect.theta1,
        effect.ve,
        path.display()
    );
    Ok(())
}

fn run_simulate(flags: &CommonFlags) -> Result<(), CliError> {
    let mut merged = merge("simulate", flags)?;
    configure_threads(merged.run.threads);
    let spec = scenario_from_config(&merged, flags)?;
    merged.run.preset = Some(spec.name.clone());
    let plan = variance_plan(merged.variance, merged.run.b);
    let results = run_replicates(&spec, merged.estimator, &plan).map_err(estimation)?;
    let truth = true_parameters(&spec, merged.run.truth_draws);
    let metrics = aggregate_metrics(&results, &truth).map_err(estimation)?;

    ensure_out_dir(&merged.run.out)?;
    let write = |name: &str, f: &dyn Fn(&mut fs::File) -> Result<(), CliError>| -> Result<(), CliError> {
        let path = merged.run.out.join(name);
        let mut file = fs::File::create(&path)
            .map_err(|e| estimation(format!("cannot write {}: {e}", path.display())))?;
        f(&mut file)
    };
    write("raw_replicates.csv", &|f| {
        emit_raw_replicates(f, &results).map_err(estimation)
    })?;
    let metrics_slice = std::slice::from_ref(&metrics);
    write("metrics.csv", &|f| {
        emit_metrics(f, metrics_slice, ReportFormat::Csv).map_err(estimation)
    })?;
    write("metrics.txt", &|f| {
        emit_metrics(f, metrics_slice, ReportFormat::TextTable).map_err(estimation)
    })?;
    write("plotdata.csv", &|f| {
        emit_plot_data(f, metrics_slice).map_err(estimation)
    })?;
    write_manifest(
        &merged.run,
        serde_json::json!({
            "scenario": spec.name,
            "replicates": spec.replicates,
            "failures": results.failures.len(),
            "truth": { "theta0": truth.theta0, "theta1": truth.theta1, "ve": truth.ve },
        }),
    )?;
    let mut table = Vec::new();
    emit_metrics(&mut table, metrics_slice, ReportFormat::TextTable).map_err(estimation)?;
    print!("{}", String::from_utf8_lossy(&table));
    println!("wrote {}", merged.run.out.display());
    Ok(())
}

fn run_sensitivity(input: Option<PathBuf>, flags: &CommonFlags) -> Result<(), CliError> {
    let mut merged = merge("sensitivity", flags)?;
    configure_threads(merged.run.threads);
    let section = merged.cfg.sensitivity.clone().unwrap_or_default();
    let input = input
        .or(section.input.clone())
        .ok_or_else(|| validation("sensitivity needs an input CSV (argument or [sensitivity].input)"))?;
    merged.run.input = Some(input.clone());
    let t0 = section.t0.unwrap_or(90.0);
    let dataset = load_dataset(&input, t0)?;
    let design = design_from_section(section.design.as_ref(), &dataset)?;
    let u_uc = section.u_uc.clone().unwrap_or_else(|| vec![0.0]);
    let u_ct = section.u_ct.clone().unwrap_or_else(|| vec![0.0]);
    let mut grid = Vec::with_capacity(u_uc.len() * u_ct.len());
    for &uc in &u_uc {
        for &ct in &u_ct {
            grid.push(BiasSpecification { u_uc: uc, u_ct: ct });
        }
    }
    let threshold = flags
        .threshold
        .or(section.threshold)
        .unwrap_or(merged.run.threshold);
    let pipeline = TransportPipeline::new(
        &dataset,
        &design,
        PipelineOptions {
            bias: BiasSpecification::ZERO,
            estimator: merged.estimator,
            p_a1: 0.5,
        },
    )
    .map_err(estimation)?;
    let sweep_variance = match merged.variance {
        VarianceChoice::Sandwich => SweepVariance::Sandwich,
        VarianceChoice::Eif => SweepVariance::Eif,
        VarianceChoice::Bootstrap | VarianceChoice::Both => SweepVariance::Bootstrap {
            b: merged.run.b,
            seed: merged.run.seed,
        },
    };
    let (grid_eval, report) =
        sweep_grid(&pipeline, &grid, merged.run.level, sweep_variance, threshold)
            .map_err(estimation)?;

    ensure_out_dir(&merged.run.out)?;
    let grid_path = merged.run.out.join("grid.csv");
    let mut file = fs::File::create(&grid_path)
        .map_err(|e| estimation(format!("cannot write {}: {e}", grid_path.display())))?;
    emit_sensitivity_grid(&mut file, &grid_eval).map_err(estimation)?;
    let report_path = merged.run.out.join("report.csv");
    let mut file = fs::File::create(&report_path)
        .map_err(|e| estimation(format!("cannot write {}: {e}", report_path.display())))?;
    emit_sensitivity_report(&mut file, &report).map_err(estimation)?;
    write_manifest(
        &merged.run,
        serde_json::json!({
            "input": input,
            "t0": t0,
            "grid_points": grid.len(),
            "threshold": threshold,
            "ignorance_interval": [report.ignorance_interval.0, report.ignorance_interval.1],
            "eui": [report.eui.0, report.eui.1],
            "success": report.success,
        }),
    )?;
    println!(
        "sensitivity: ignorance [{:.4}, {:.4}], EUI [{:.4}, {:.4}], success={} -> {}",
        report.ignorance_interval.0,
        report.ignorance_interval.1,
        report.eui.0,
        report.eui.1,
        report.success,
        merged.run.out.display()
    );
    Ok(())
}

/// Run one parsed command; the binary maps the error to its exit code.
pub fn run_command(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Estimate { input, common } => run_estimate(input, &common),
        Command::Simulate { common } => run_simulate(&common),
        Command::Sensitivity { input, common } => run_sensitivity(input, &common),
        Command::Presets => {
            for name in preset_names() {
                println!("{name}");
            }
            Ok(())
        }
    }
}
