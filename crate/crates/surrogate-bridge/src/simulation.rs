//! Data-generating processes and the Monte Carlo study runner.
//!
//! A [`ScenarioSpec`] fixes the two-study design: covariates
//! `X₁ ~ Bernoulli(0.05)`, `X₂ ~ Uniform(18, 40)`, `X₃ ~ Normal(0, 1)` shared
//! by both studies; a control surrogate law `S | A=0 ~ Normal(m, v)` shared by
//! the observational study and the placebo arm; a treated-arm surrogate law
//! that moves the mean/variance to hit a target efficacy; and a Bernoulli
//! outcome with logit-scale linear predictor
//! `β₀ + β₁ S + β₂ X₁ + β₃ X₂ + β₄ X₃`. The treated-arm conditional outcome
//! law equals the control one, so the control-to-treated bias is truly zero
//! and all efficacy flows through the surrogate shift.
//!
//! Surrogate measurement follows the two-phase designs: all observational
//! cases plus a control sample of `k` times the case count, and per-arm
//! simple random samples in the trial.
//!
//! Replicates are deterministic functions of `(spec, base_seed, index)`: each
//! replicate owns a derived random stream, so results do not depend on thread
//! count or scheduling. [`true_parameters`] is the brute-force Monte Carlo
//! oracle for the scenario truth, and [`aggregate_metrics`] reduces raw
//! replicate rows to the table-style operating characteristics (bias, average
//! SEs, SD of estimates, CI coverage, success probability).

use rand::Rng;
use rand_distr::{Distribution, Normal as NormalDist};
use rayon::prelude::*;
use thiserror::Error;

use crate::data_model::{
    HarmonizedDataset, ObsDesign, ParticipantRecord, RctDesign, SamplingDesign,
};
use crate::estimators::{
    BiasSpecification, EstimationError, EstimatorKind, PipelineOptions, TransportPipeline,
};
use crate::glm::expit;
use crate::inference::{
    eif_variance_report, sandwich_variance, wald_interval_ve, InferenceError, PiBlockMode,
};
use crate::streams::{domain, substream};

/// Follow-up time recorded for simulated cases (anywhere inside the horizon).
const CASE_EVENT_DAY: f64 = 45.0;
/// Scenario-level failure budget for replicate errors.
const MAX_FAILURE_FRACTION: f64 = 0.02;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("scenario '{scenario}' replicate {replicate}: no cases drawn (base_seed {seed})")]
    NoCases {
        scenario: String,
        replicate: usize,
        seed: u64,
    },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Data(#[from] crate::data_model::DataError),
    #[error(
        "scenario '{scenario}': {failures} of {replicates} replicates failed (budget {budget:.0}%); first: {first}"
    )]
    TooManyFailures {
        scenario: String,
        failures: usize,
        replicates: usize,
        budget: f64,
        first: String,
    },
    #[error("no replicate rows to aggregate")]
    EmptyResults,
    #[error("unknown preset '{0}'")]
    UnknownPreset(String),
}

/// Mean/variance parameterization of a normal surrogate law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalLaw {
    pub mean: f64,
    pub variance: f64,
}

impl NormalLaw {
    fn sampler(&self) -> NormalDist<f64> {
        NormalDist::new(self.mean, self.variance.sqrt()).expect("positive variance")
    }
}

/// How many phase 3 participants per arm get the surrogate measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampledPerArm {
    Count(usize),
    All,
}

/// Complete description of one simulation scenario.
#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    pub name: String,
    pub n_obs: usize,
    pub n_rct_per_arm: usize,
    pub x1_prob: f64,
    pub x2_range: (f64, f64),
    pub s_law_control: NormalLaw,
    pub s_law_vaccine: NormalLaw,
    /// Logit-scale coefficients on `(1, S, X₁, X₂, X₃)`.
    pub outcome_coefficients: [f64; 5],
    pub obs_control_ratio: u32,
    pub rct_sampled_per_arm: SampledPerArm,
    /// Bias constants assumed by the analysis (the generated truth always has
    /// zero bias).
    pub analysis_bias: BiasSpecification,
    pub replicates: usize,
    pub base_seed: u64,
    pub t0: f64,
    /// Redraw instead of erroring when a replicate happens to contain no
    /// cases.
    pub resample_on_zero_cases: bool,
}

impl ScenarioSpec {
    fn base(name: &str) -> ScenarioSpec {
        ScenarioSpec {
            name: name.to_string(),
            n_obs: 39_000,
            n_rct_per_arm: 3_100,
            x1_prob: 0.05,
            x2_range: (18.0, 40.0),
            s_law_control: NormalLaw {
                mean: -1.45,
                variance: 0.0225,
            },
            s_law_vaccine: NormalLaw {
                mean: -1.45,
                variance: 0.0225,
            },
            outcome_coefficients: [-17.1, -8.2, 0.69, -0.03, 0.0],
            obs_control_ratio: 5,
            rct_sampled_per_arm: SampledPerArm::Count(500),
            analysis_bias: BiasSpecification::ZERO,
            replicates: 800,
            base_seed: 1,
            t0: 90.0,
            resample_on_zero_cases: false,
        }
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        let bad = |msg: String| Err(SimulationError::InvalidScenario(msg));
        if self.n_obs == 0 || self.n_rct_per_arm == 0 {
            return bad("study sizes must be positive".into());
        }
        if self.replicates == 0 {
            return bad("replicate count must be at least 1".into());
        }
        if self.s_law_control.variance <= 0.0 || self.s_law_vaccine.variance <= 0.0 {
            return bad("surrogate variances must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.x1_prob) {
            return bad(format!("x1_prob {} outside [0,1]", self.x1_prob));
        }
        if self.x2_range.1 <= self.x2_range.0 {
            return bad("x2 range is empty".into());
        }
        if self.obs_control_ratio == 0 {
            return bad("control ratio must be ≥ 1".into());
        }
        if let SampledPerArm::Count(c) = self.rct_sampled_per_arm {
            if c == 0 || c > self.n_rct_per_arm {
                return bad(format!(
                    "sampled-per-arm {c} outside 1..={}",
                    self.n_rct_per_arm
                ));
            }
        }
        Ok(())
    }

    /// The two-phase sampling design implied by the scenario.
    pub fn sampling_design(&self) -> SamplingDesign {
        SamplingDesign {
            obs: ObsDesign::CaseControl {
                control_ratio: self.obs_control_ratio,
            },
            rct: match self.rct_sampled_per_arm {
                SampledPerArm::Count(c) => RctDesign::Srs {
                    sampled_per_arm: [c, c],
                },
                SampledPerArm::All => RctDesign::Complete,
            },
        }
    }

    /// Override the per-arm phase 3 sample size.
    pub fn with_sampled(mut self, sampled: SampledPerArm) -> Self {
        self.rct_sampled_per_arm = sampled;
        self
    }
}

/// Vaccine-arm surrogate laws that hit the target efficacies.
fn sim1_vaccine_law(ve_percent: u32) -> Option<NormalLaw> {
    match ve_percent {
        0 => Some(NormalLaw { mean: -1.45, variance: 0.0225 }),
        50 => Some(NormalLaw { mean: -1.296, variance: 0.04 }),
        90 => Some(NormalLaw { mean: -1.08, variance: 0.0441 }),
        _ => None,
    }
}

fn supp_vaccine_law(ve_percent: u32) -> Option<NormalLaw> {
    match ve_percent {
        0 => Some(NormalLaw { mean: -1.45, variance: 0.0225 }),
        50 => Some(NormalLaw { mean: -1.29, variance: 0.04 }),
        90 => Some(NormalLaw { mean: -1.04, variance: 0.0441 }),
        _ => None,
    }
}

/// Analysis-bias constants used by the second study, keyed by the proportion
/// of the treatment effect explained (stored as the published rounded values,
/// not recomputed from the conversion formula).
fn sim2_bias(pte_percent: u32) -> Option<f64> {
    match pte_percent {
        100 => Some(0.0),
        83 => Some(0.0006),
        67 => Some(0.0012),
        _ => None,
    }
}

/// Named scenario presets: `sim1-ve{0,50,90}-s{100,250,500}`,
/// `sim2-pte{100,83,67}-ve{0,50,90}`, `supp-ve{0,50,90}`.
pub fn preset(name: &str) -> Result<ScenarioSpec, SimulationError> {
    let unknown = || SimulationError::UnknownPreset(name.to_string());
    let mut spec = ScenarioSpec::base(name);
    if let Some(rest) = name.strip_prefix("sim1-ve") {
        let (ve, sampled) = rest.split_once("-s").ok_or_else(unknown)?;
        let ve: u32 = ve.parse().map_err(|_| unknown())?;
        let sampled: usize = sampled.parse().map_err(|_| unknown())?;
        if ![100usize, 250, 500].contains(&sampled) {
            return Err(unknown());
        }
        spec.s_law_vaccine = sim1_vaccine_law(ve).ok_or_else(unknown)?;
        spec.rct_sampled_per_arm = SampledPerArm::Count(sampled);
        Ok(spec)
    } else if let Some(rest) = name.strip_prefix("sim2-pte") {
        let (pte, ve) = rest.split_once("-ve").ok_or_else(unknown)?;
        let pte: u32 = pte.parse().map_err(|_| unknown())?;
        let ve: u32 = ve.parse().map_err(|_| unknown())?;
        spec.s_law_vaccine = sim1_vaccine_law(ve).ok_or_else(unknown)?;
        spec.rct_sampled_per_arm = SampledPerArm::Count(250);
        spec.analysis_bias = BiasSpecification {
            u_uc: 0.0,
            u_ct: sim2_bias(pte).ok_or_else(unknown)?,
        };
        Ok(spec)
    } else if let Some(ve) = name.strip_prefix("supp-ve") {
        let ve: u32 = ve.parse().map_err(|_| unknown())?;
        spec.outcome_coefficients = [-14.0, -7.0, 0.69, -0.03, 0.0];
        spec.s_law_vaccine = supp_vaccine_law(ve).ok_or_else(unknown)?;
        spec.rct_sampled_per_arm = SampledPerArm::All;
        Ok(spec)
    } else {
        Err(unknown())
    }
}

/// All preset names, for CLI listings.
pub fn preset_names() -> Vec<String> {
    let mut names = Vec::new();
    for ve in [0, 50, 90] {
        for s in [100, 250, 500] {
            names.push(format!("sim1-ve{ve}-s{s}"));
        }
    }
    for pte in [100, 83, 67] {
        for ve in [0, 50, 90] {
            names.push(format!("sim2-pte{pte}-ve{ve}"));
        }
    }
    for ve in [0, 50, 90] {
        names.push(format!("supp-ve{ve}"));
    }
    names
}

struct Covariates {
    x1: f64,
    x2: f64,
    x3: f64,
}

fn draw_covariates<R: Rng>(spec: &ScenarioSpec, rng: &mut R) -> Covariates {
    let x1 = f64::from(rng.random_bool(spec.x1_prob));
    let x2 = rng.random_range(spec.x2_range.0..spec.x2_range.1);
    let x3: f64 = rand_distr::StandardNormal.sample(rng);
    Covariates { x1, x2, x3 }
}

fn outcome_probability(spec: &ScenarioSpec, s: f64, c: &Covariates) -> f64 {
    let b = &spec.outcome_coefficients;
    expit(b[0] + b[1] * s + b[2] * c.x1 + b[3] * c.x2 + b[4] * c.x3)
}

/// Draw `amount` distinct indices from `0..len` (partial Fisher–Yates).
fn sample_without_replacement<R: Rng>(rng: &mut R, len: usize, amount: usize) -> Vec<usize> {
    debug_assert!(amount <= len);
    let mut idx: Vec<usize> = (0..len).collect();
    for i in 0..amount {
        let j = rng.random_range(i..len);
        idx.swap(i, j);
    }
    idx.truncate(amount);
    idx
}

/// Generate one replicate's harmonized dataset. Byte-identical for the same
/// `(spec, replicate_index)`.
pub fn generate_trial(
    spec: &ScenarioSpec,
    replicate_index: usize,
) -> Result<HarmonizedDataset, SimulationError> {
    spec.validate()?;
    for attempt in 0..100u64 {
        let mut rng = if attempt == 0 {
            substream(spec.base_seed, &[domain::GENERATE, replicate_index as u64])
        } else {
            substream(
                spec.base_seed,
                &[domain::GENERATE, replicate_index as u64, attempt],
            )
        };
        match generate_once(spec, &mut rng) {
            Some(dataset) => return Ok(dataset),
            None if spec.resample_on_zero_cases => continue,
            None => {
                return Err(SimulationError::NoCases {
                    scenario: spec.name.clone(),
                    replicate: replicate_index,
                    seed: spec.base_seed,
                })
            }
        }
    }
    Err(SimulationError::NoCases {
        scenario: spec.name.clone(),
        replicate: replicate_index,
        seed: spec.base_seed,
    })
}

fn generate_once<R: Rng>(spec: &ScenarioSpec, rng: &mut R) -> Option<HarmonizedDataset> {
    let control_law = spec.s_law_control.sampler();
    let vaccine_law = spec.s_law_vaccine.sampler();
    let n_total = spec.n_obs + 2 * spec.n_rct_per_arm;
    let mut records = Vec::with_capacity(n_total);
    let mut case_rows: Vec<usize> = Vec::new();
    let mut control_rows: Vec<usize> = Vec::new();
    let mut surrogates: Vec<f64> = Vec::with_capacity(n_total);

    // Observational study: outcomes observed, surrogate measured later by
    // case-control sampling.
    for i in 0..spec.n_obs {
        let c = draw_covariates(spec, rng);
        let s = control_law.sample(rng);
        let y = u8::from(rng.random_bool(outcome_probability(spec, s, &c)));
        if y == 1 {
            case_rows.push(i);
        } else {
            control_rows.push(i);
        }
        surrogates.push(s);
        records.push(ParticipantRecord {
            id: format!("obs-{i}"),
            x: vec![c.x1, c.x2, c.x3],
            z: 1,
            a: 0,
            eps_s: false,
            s: None,
            t_tilde: Some(if y == 1 { CASE_EVENT_DAY } else { spec.t0 }),
            delta: Some(y),
            y: None,
        });
    }
    if case_rows.is_empty() {
        return None;
    }

    // Phase 3: arm-specific surrogate laws, no outcome data carried.
    for arm in 0..2u8 {
        let law = if arm == 1 { &vaccine_law } else { &control_law };
        for i in 0..spec.n_rct_per_arm {
            let c = draw_covariates(spec, rng);
            let s = law.sample(rng);
            surrogates.push(s);
            records.push(ParticipantRecord {
                id: format!("rct{arm}-{i}"),
                x: vec![c.x1, c.x2, c.x3],
                z: 0,
                a: arm,
                eps_s: false,
                s: None,
                t_tilde: None,
                delta: None,
                y: None,
            });
        }
    }

    // Two-phase measurement of S: all cases, a control sample of k times the
    // case count (capped by the available controls), per-arm SRS in the trial.
    let measure = |row: usize, records: &mut Vec<ParticipantRecord>| {
        records[row].eps_s = true;
        records[row].s = Some(vec![surrogates[row]]);
    };
    for &row in &case_rows {
        measure(row, &mut records);
    }
    let k = spec.obs_control_ratio as usize;
    let wanted = (k * case_rows.len()).min(control_rows.len());
    for pick in sample_without_replacement(rng, control_rows.len(), wanted) {
        measure(control_rows[pick], &mut records);
    }
    for arm in 0..2usize {
        let offset = spec.n_obs + arm * spec.n_rct_per_arm;
        let sampled = match spec.rct_sampled_per_arm {
            SampledPerArm::All => spec.n_rct_per_arm,
            SampledPerArm::Count(c) => c,
        };
        for pick in sample_without_replacement(rng, spec.n_rct_per_arm, sampled) {
            measure(offset + pick, &mut records);
        }
    }

    let dataset = HarmonizedDataset::new(
        records,
        spec.t0,
        vec!["x_1".into(), "x_2".into(), "x_3".into()],
        vec!["s_1".into()],
    )
    .expect("generated dataset is nonempty");
    Some(dataset)
}

/// Scenario truth from brute-force Monte Carlo integration of the DGP.
#[derive(Debug, Clone, Copy)]
pub struct TrueParameters {
    pub theta0: f64,
    pub theta1: f64,
    pub ve: f64,
}

impl TrueParameters {
    pub fn log_one_minus_ve(&self) -> f64 {
        (self.theta1 / self.theta0).ln()
    }
}

/// Monte Carlo oracle for the true arm risks and efficacy: average the
/// outcome probability over fresh covariate and surrogate draws, sharing the
/// covariates across arms so the efficacy ratio is estimated with common
/// random numbers.
pub fn true_parameters(spec: &ScenarioSpec, n_mc: usize) -> TrueParameters {
    let mut rng = substream(spec.base_seed, &[domain::TRUTH]);
    let control_law = spec.s_law_control.sampler();
    let vaccine_law = spec.s_law_vaccine.sampler();
    let mut acc0 = 0.0;
    let mut acc1 = 0.0;
    for _ in 0..n_mc {
        let c = draw_covariates(spec, &mut rng);
        acc0 += outcome_probability(spec, control_law.sample(&mut rng), &c);
        acc1 += outcome_probability(spec, vaccine_law.sample(&mut rng), &c);
    }
    let theta0 = acc0 / n_mc as f64;
    let theta1 = acc1 / n_mc as f64;
    TrueParameters {
        theta0,
        theta1,
        ve: 1.0 - theta1 / theta0,
    }
}

/// Which variances each replicate computes.
#[derive(Debug, Clone, Copy)]
pub struct VariancePlan {
    /// Sandwich (plug-in) or projected-EIF variance (one-step).
    pub analytic: bool,
    /// Stratified bootstrap with this replicate count.
    pub bootstrap: Option<usize>,
}

impl VariancePlan {
    pub fn analytic_only() -> Self {
        VariancePlan {
            analytic: true,
            bootstrap: None,
        }
    }
    pub fn both(b: usize) -> Self {
        VariancePlan {
            analytic: true,
            bootstrap: Some(b),
        }
    }
}

/// One replicate's estimates and standard errors (per quantity: θ₀, θ₁, and
/// `log(1−VE)`).
#[derive(Debug, Clone)]
pub struct ReplicateRow {
    pub replicate: usize,
    pub theta0: f64,
    pub theta1: f64,
    pub log_one_minus_ve: f64,
    pub ve: f64,
    pub se_sandwich: Option<[f64; 3]>,
    pub se_eif: Option<[f64; 3]>,
    pub se_bootstrap: Option<[f64; 3]>,
    pub bootstrap_discarded: usize,
    pub ve_ci: Option<(f64, f64)>,
    pub success: Option<bool>,
}

impl ReplicateRow {
    /// SEs used for intervals: sandwich, then EIF, then bootstrap.
    pub fn primary_se(&self) -> Option<[f64; 3]> {
        self.se_sandwich.or(self.se_eif).or(self.se_bootstrap)
    }
}

/// A failed replicate, kept for the run manifest.
#[derive(Debug, Clone)]
pub struct ReplicateFailure {
    pub replicate: usize,
    pub message: String,
}

/// Raw results of one scenario run.
#[derive(Debug, Clone)]
pub struct SimulationResults {
    pub scenario: String,
    pub estimator: EstimatorKind,
    pub rows: Vec<ReplicateRow>,
    pub failures: Vec<ReplicateFailure>,
}

/// Success threshold used by the simulation studies.
pub const SUCCESS_THRESHOLD: f64 = 0.3;
/// Confidence level used by the simulation studies.
pub const CONFIDENCE_LEVEL: f64 = 0.95;

fn run_one_replicate(
    spec: &ScenarioSpec,
    estimator: EstimatorKind,
    plan: &VariancePlan,
    rep: usize,
) -> Result<ReplicateRow, SimulationError> {
    let dataset = generate_trial(spec, rep)?;
    let design = spec.sampling_design();
    let pipeline = TransportPipeline::new(
        &dataset,
        &design,
        PipelineOptions {
            bias: spec.analysis_bias,
            estimator,
            p_a1: 0.5,
        },
    )?;
    let fit = pipeline.fit()?;
    let effect = fit.effect().clone();
    let mut row = ReplicateRow {
        replicate: rep,
        theta0: effect.theta0,
        theta1: effect.theta1,
        log_one_minus_ve: effect.log_one_minus_ve,
        ve: effect.ve,
        se_sandwich: None,
        se_eif: None,
        se_bootstrap: None,
        bootstrap_discarded: 0,
        ve_ci: None,
        success: None,
    };
    if plan.analytic {
        match estimator {
            EstimatorKind::PlugIn => {
                let report = sandwich_variance(&pipeline, &fit, PiBlockMode::Known)?;
                row.se_sandwich = Some([
                    report.se_theta0,
                    report.se_theta1,
                    report.se_log_one_minus_ve,
                ]);
            }
            EstimatorKind::OneStep => {
                let projected = fit
                    .projected_eif
                    .as_ref()
                    .expect("one-step fit carries projected EIF");
                let report = eif_variance_report(
                    &projected[0],
                    &projected[1],
                    effect.theta0,
                    effect.theta1,
                )?;
                row.se_eif = Some([
                    report.se_theta0,
                    report.se_theta1,
                    report.se_log_one_minus_ve,
                ]);
            }
        }
    }
    if let Some(b) = plan.bootstrap {
        let boot_seed = derive_bootstrap_seed(spec.base_seed, rep);
        let report = crate::inference::bootstrap_pipeline(&pipeline, b, boot_seed)?;
        row.se_bootstrap = Some([
            report.se_theta0,
            report.se_theta1,
            report.se_log_one_minus_ve,
        ]);
        row.bootstrap_discarded = report.discarded_resamples;
    }
    if let Some(se) = row.primary_se() {
        let ci = wald_interval_ve(&effect, se[2], CONFIDENCE_LEVEL)?;
        row.ve_ci = Some(ci);
        row.success = Some(ci.0 >= SUCCESS_THRESHOLD);
    }
    Ok(row)
}

fn derive_bootstrap_seed(base_seed: u64, rep: usize) -> u64 {
    let mut rng = substream(base_seed, &[domain::REPLICATE, rep as u64, domain::BOOTSTRAP]);
    rng.random::<u64>()
}

/// Run every replicate of a scenario (in parallel when a rayon pool is
/// configured), recording failures and aborting when more than 2% of
/// replicates fail.
pub fn run_replicates(
    spec: &ScenarioSpec,
    estimator: EstimatorKind,
    plan: &VariancePlan,
) -> Result<SimulationResults, SimulationError> {
    spec.validate()?;
    let outcomes: Vec<Result<ReplicateRow, SimulationError>> = (0..spec.replicates)
        .into_par_iter()
        .map(|rep| run_one_replicate(spec, estimator, plan, rep))
        .collect();
    let mut rows = Vec::with_capacity(spec.replicates);
    let mut failures = Vec::new();
    for (rep, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(row) => rows.push(row),
            Err(e) => failures.push(ReplicateFailure {
                replicate: rep,
                message: e.to_string(),
            }),
        }
    }
    if failures.len() as f64 > MAX_FAILURE_FRACTION * spec.replicates as f64 {
        return Err(SimulationError::TooManyFailures {
            scenario: spec.name.clone(),
            failures: failures.len(),
            replicates: spec.replicates,
            budget: MAX_FAILURE_FRACTION * 100.0,
            first: failures[0].message.clone(),
        });
    }
    Ok(SimulationResults {
        scenario: spec.name.clone(),
        estimator,
        rows,
        failures,
    })
}

/// Operating characteristics of one estimated quantity.
#[derive(Debug, Clone)]
pub struct ParameterMetrics {
    /// `theta0`, `theta1`, or `ve`.
    pub parameter: &'static str,
    pub truth: f64,
    /// Mean estimate minus truth (VE bias on the VE scale).
    pub bias: f64,
    /// Average standard errors; for the VE row these are on the
    /// `log(1−VE)` scale.
    pub se_sandwich: Option<f64>,
    pub se_eif: Option<f64>,
    pub se_bootstrap: Option<f64>,
    /// SD of the estimates over replicates (log scale for the VE row).
    pub sd: f64,
    /// Wald coverage of the truth using the primary SE.
    pub coverage: Option<f64>,
    /// Fraction of replicates meeting the success criterion (VE row only).
    pub success_probability: Option<f64>,
    pub median_estimate: f64,
    pub median_ci_lower: Option<f64>,
    pub median_ci_upper: Option<f64>,
}

/// Table-style aggregates for one scenario.
#[derive(Debug, Clone)]
pub struct ReplicateMetrics {
    pub scenario: String,
    pub estimator: EstimatorKind,
    pub parameters: Vec<ParameterMetrics>,
    pub n_replicates: usize,
    pub n_failures: usize,
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Reduce raw replicate rows against the scenario truth.
pub fn aggregate_metrics(
    results: &SimulationResults,
    truth: &TrueParameters,
) -> Result<ReplicateMetrics, SimulationError> {
    if results.rows.is_empty() {
        return Err(SimulationError::EmptyResults);
    }
    let rows = &results.rows;
    let m = rows.len() as f64;
    let z = crate::inference::normal_quantile(CONFIDENCE_LEVEL).expect("fixed level");

    let mut parameters = Vec::with_capacity(3);
    // Arm risks on the θ scale.
    for (idx, (name, truth_value)) in [("theta0", truth.theta0), ("theta1", truth.theta1)]
        .into_iter()
        .enumerate()
    {
        let estimate = |r: &ReplicateRow| if idx == 0 { r.theta0 } else { r.theta1 };
        let mean = rows.iter().map(|r| estimate(r)).sum::<f64>() / m;
        let sd = (rows
            .iter()
            .map(|r| (estimate(r) - mean).powi(2))
            .sum::<f64>()
            / (m - 1.0).max(1.0))
        .sqrt();
        let avg_se = |pick: &dyn Fn(&ReplicateRow) -> Option<[f64; 3]>| -> Option<f64> {
            let values: Vec<f64> = rows.iter().filter_map(|r| pick(r).map(|se| se[idx])).collect();
            (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
        };
        let coverage = {
            let covered: Vec<bool> = rows
                .iter()
                .filter_map(|r| {
                    r.primary_se().map(|se| {
                        (estimate(r) - truth_value).abs() <= z * se[idx]
                    })
                })
                .collect();
            (!covered.is_empty())
                .then(|| covered.iter().filter(|&&c| c).count() as f64 / covered.len() as f64)
        };
        let mut estimates: Vec<f64> = rows.iter().map(|r| estimate(r)).collect();
        let mut lowers: Vec<f64> = rows
            .iter()
            .filter_map(|r| r.primary_se().map(|se| estimate(r) - z * se[idx]))
            .collect();
        let mut uppers: Vec<f64> = rows
            .iter()
            .filter_map(|r| r.primary_se().map(|se| estimate(r) + z * se[idx]))
            .collect();
        parameters.push(ParameterMetrics {
            parameter: name,
            truth: truth_value,
            bias: mean - truth_value,
            se_sandwich: avg_se(&|r: &ReplicateRow| r.se_sandwich),
            se_eif: avg_se(&|r: &ReplicateRow| r.se_eif),
            se_bootstrap: avg_se(&|r: &ReplicateRow| r.se_bootstrap),
            sd,
            coverage,
            success_probability: None,
            median_estimate: median(&mut estimates),
            median_ci_lower: (!lowers.is_empty()).then(|| median(&mut lowers)),
            median_ci_upper: (!uppers.is_empty()).then(|| median(&mut uppers)),
        });
    }

    // VE row: bias on the VE scale, SE/SD on the log(1−VE) scale, coverage of
    // the VE interval, success probability at the 0.3 threshold.
    {
        let mean_ve = rows.iter().map(|r| r.ve).sum::<f64>() / m;
        let mean_log = rows.iter().map(|r| r.log_one_minus_ve).sum::<f64>() / m;
        let sd_log = (rows
            .iter()
            .map(|r| (r.log_one_minus_ve - mean_log).powi(2))
            .sum::<f64>()
            / (m - 1.0).max(1.0))
        .sqrt();
        let avg_se = |pick: &dyn Fn(&ReplicateRow) -> Option<[f64; 3]>| -> Option<f64> {
            let values: Vec<f64> = rows.iter().filter_map(|r| pick(r).map(|se| se[2])).collect();
            (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
        };
        let coverage = {
            let covered: Vec<bool> = rows
                .iter()
                .filter_map(|r| r.ve_ci.map(|(lo, hi)| lo <= truth.ve && truth.ve <= hi))
                .collect();
            (!covered.is_empty())
                .then(|| covered.iter().filter(|&&c| c).count() as f64 / covered.len() as f64)
        };
        let success = {
            let flags: Vec<bool> = rows.iter().filter_map(|r| r.success).collect();
            (!flags.is_empty())
                .then(|| flags.iter().filter(|&&s| s).count() as f64 / flags.len() as f64)
        };
        let mut estimates: Vec<f64> = rows.iter().map(|r| r.ve).collect();
        let mut lowers: Vec<f64> = rows.iter().filter_map(|r| r.ve_ci.map(|c| c.0)).collect();
        let mut uppers: Vec<f64> = rows.iter().filter_map(|r| r.ve_ci.map(|c| c.1)).collect();
        parameters.push(ParameterMetrics {
            parameter: "ve",
            truth: truth.ve,
            bias: mean_ve - truth.ve,
            se_sandwich: avg_se(&|r: &ReplicateRow| r.se_sandwich),
            se_eif: avg_se(&|r: &ReplicateRow| r.se_eif),
            se_bootstrap: avg_se(&|r: &ReplicateRow| r.se_bootstrap),
            sd: sd_log,
            coverage,
            success_probability: success,
            median_estimate: median(&mut estimates),
            median_ci_lower: (!lowers.is_empty()).then(|| median(&mut lowers)),
            median_ci_upper: (!uppers.is_empty()).then(|| median(&mut uppers)),
        });
    }

    Ok(ReplicateMetrics {
        scenario: results.scenario.clone(),
        estimator: results.estimator,
        parameters,
        n_replicates: rows.len(),
        n_failures: results.failures.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse() {
        for name in preset_names() {
            let spec = preset(&name).unwrap();
            assert!(spec.validate().is_ok(), "{name}");
        }
        assert!(preset("sim1-ve10-s500").is_err());
        assert!(preset("nonsense").is_err());
    }

    #[test]
    fn sim2_presets_carry_published_bias_constants() {
        assert_eq!(preset("sim2-pte100-ve50").unwrap().analysis_bias.u_ct, 0.0);
        assert_eq!(preset("sim2-pte83-ve50").unwrap().analysis_bias.u_ct, 0.0006);
        assert_eq!(preset("sim2-pte67-ve90").unwrap().analysis_bias.u_ct, 0.0012);
    }

    #[test]
    fn generation_is_deterministic() {
        let mut spec = preset("sim1-ve50-s100").unwrap();
        spec.n_obs = 4_000;
        spec.n_rct_per_arm = 300;
        spec.rct_sampled_per_arm = SampledPerArm::Count(50);
        let a = generate_trial(&spec, 3).unwrap();
        let b = generate_trial(&spec, 3).unwrap();
        assert_eq!(a.records.len(), b.records.len());
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra, rb);
        }
        let c = generate_trial(&spec, 4).unwrap();
        assert!(a.records.iter().zip(&c.records).any(|(x, y)| x != y));
    }

    #[test]
    fn generated_design_counts_match_spec() {
        let mut spec = preset("sim1-ve0-s100").unwrap();
        spec.n_obs = 8_000;
        spec.n_rct_per_arm = 400;
        spec.rct_sampled_per_arm = SampledPerArm::Count(100);
        let d = generate_trial(&spec, 0).unwrap();
        assert_eq!(d.n_obs, 8_000);
        assert_eq!(d.n_rct, 800);
        let cases = d
            .records
            .iter()
            .filter(|r| r.z == 1 && r.y == Some(1))
            .count();
        assert!(cases > 0);
        let sampled_controls = d
            .records
            .iter()
            .filter(|r| r.z == 1 && r.y == Some(0) && r.eps_s)
            .count();
        assert_eq!(sampled_controls, 5 * cases);
        for arm in 0..2u8 {
            let sampled = d
                .records
                .iter()
                .filter(|r| r.z == 0 && r.a == arm && r.eps_s)
                .count();
            assert_eq!(sampled, 100);
        }
        // All cases measured.
        assert!(d
            .records
            .iter()
            .filter(|r| r.z == 1 && r.y == Some(1))
            .all(|r| r.eps_s));
        // Validation passes on generated data.
        assert!(crate::data_model::validate_dataset(&d).passed());
    }

    #[test]
    fn truth_oracle_hits_published_targets() {
        let spec = preset("sim1-ve0-s500").unwrap();
        let t = true_parameters(&spec, 400_000);
        assert!((t.theta0 - 0.005).abs() < 0.0005, "theta0 = {}", t.theta0);
        assert!(t.ve.abs() < 0.02, "ve = {}", t.ve);
        let spec50 = preset("sim1-ve50-s500").unwrap();
        let t50 = true_parameters(&spec50, 400_000);
        assert!((t50.ve - 0.5).abs() < 0.03, "ve = {}", t50.ve);
    }

    #[test]
    fn aggregate_of_perfect_estimates() {
        let truth = TrueParameters {
            theta0: 0.005,
            theta1: 0.0025,
            ve: 0.5,
        };
        let rows: Vec<ReplicateRow> = (0..10)
            .map(|i| ReplicateRow {
                replicate: i,
                theta0: truth.theta0,
                theta1: truth.theta1,
                log_one_minus_ve: truth.log_one_minus_ve(),
                ve: truth.ve,
                se_sandwich: Some([0.0, 0.0, 0.0]),
                se_eif: None,
                se_bootstrap: None,
                bootstrap_discarded: 0,
                ve_ci: Some((truth.ve, truth.ve)),
                success: Some(truth.ve >= SUCCESS_THRESHOLD),
            })
            .collect();
        let results = SimulationResults {
            scenario: "test".into(),
            estimator: EstimatorKind::PlugIn,
            rows,
            failures: vec![],
        };
        let metrics = aggregate_metrics(&results, &truth).unwrap();
        for p in &metrics.parameters {
            assert!(p.bias.abs() < 1e-15, "{}: bias {}", p.parameter, p.bias);
            assert!(p.sd.abs() < 1e-15);
            assert_eq!(p.coverage, Some(1.0));
        }
        assert_eq!(metrics.parameters[2].success_probability, Some(1.0));
    }
}
