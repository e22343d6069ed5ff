//! Estimation of a treatment effect on a rare binary outcome by transporting a
//! surrogate-outcome regression from an observational study into a phase 3
//! surrogate-endpoint trial.
//!
//! The workflow mirrors the two-study design it serves:
//!
//! 1. [`data_model`] harmonizes records from an observational study (`Z = 1`,
//!    all untreated) and a phase 3 trial (`Z = 0`, randomized), derives binary
//!    outcomes from follow-up fields, and attaches inverse-probability-of-sampling
//!    weights for the two-phase measurement of the surrogate `S`.
//! 2. [`glm`] is the numerical engine: IPS-weighted logistic regression (IRLS
//!    with step-halving) and weighted linear regression (column-pivoted QR).
//! 3. [`estimators`] fits the outcome regression `g(X, S) = P(Y=1 | X, Z=1, A=0, S)`,
//!    shifts it by user-specified constant bias functions, fits arm-specific
//!    outer means on the phase 3 covariates, and produces both the plug-in and
//!    the one-step (efficient-influence-function corrected) estimators of
//!    `E[Y(a) | Z=0]` and treatment efficacy `TE = 1 - E[Y(1)|Z=0]/E[Y(0)|Z=0]`.
//! 4. [`inference`] provides stacked-estimating-equation sandwich variances,
//!    a stratified bootstrap, influence-function variances, and Wald intervals
//!    transported to the TE scale.
//! 5. [`sensitivity`] sweeps grids of bias constants into ignorance intervals,
//!    95% estimated uncertainty intervals (EUIs), and a provisional-approval
//!    success criterion.
//! 6. [`simulation`] generates synthetic two-study datasets under known truth
//!    and farms Monte Carlo replicates into table-ready operating
//!    characteristics.
//! 7. [`cli`] wires everything to a command line driven by a TOML config.
//!
//! All estimation is deterministic given a seed, independent of thread count.

pub mod cli;
pub mod data_model;
pub mod estimators;
pub mod glm;
pub mod inference;
pub mod report;
pub mod sensitivity;
pub mod simulation;
pub mod streams;

pub use data_model::{
    compute_design_weights, derive_outcome, validate_dataset, DesignWeights, HarmonizedDataset,
    ObsDesign, OutcomeStatus, ParticipantRecord, RctDesign, SamplingDesign, Stratum,
};
pub use estimators::{BiasSpecification, EffectEstimate, EstimatorKind, TransportPipeline};
pub use glm::{fit_weighted_linear, fit_weighted_logistic, predict, FitResult, Link};
pub use inference::{
    eif_variance, stratified_bootstrap, wald_interval_ve, VarianceMethod, VarianceReport,
};
pub use sensitivity::{
    colonization_bound, evaluate_success, pte_to_bias, sweep_grid, SensitivityGrid,
    SensitivityReport,
};
pub use simulation::{
    aggregate_metrics, generate_trial, run_replicates, true_parameters, ReplicateMetrics,
    ScenarioSpec,
};
