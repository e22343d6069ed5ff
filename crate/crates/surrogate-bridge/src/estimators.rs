//! The transport pipeline.
//!
//! The target parameters are `θ_a = E{ E[g*_a(X,S) | X, Z=0, A=a] | Z=0 }` for
//! `a = 0, 1`, where `g(x,s) = P(Y=1 | X=x, Z=1, A=0, S=s)` is learned in the
//! observational study and bias-shifted to `g*_0 = g − u_UC`,
//! `g*_1 = g + u_CT − u_UC` by user-specified constants. Estimation proceeds:
//!
//! 1. `ĝ`: IPS-weighted logistic regression of `Y` on `(1, S, X)` over
//!    S-measured observational records.
//! 2. `μ̂_a`: IPS-weighted linear regression of `ĝ*_a(X,S)` on `(1, X)` over
//!    S-measured phase 3 records in arm `a`.
//! 3. Plug-in: `θ̂_a = (1/n_RCT) Σ_{Z=0} μ̂_a(X_i)` over both arms.
//! 4. One-step: `θ̂_a + (1/n) Σ φ̃_a(O_i)` where `φ̃_a` is the observed-data
//!    influence function — the complete-data `φ_a` for S-measured records,
//!    combined with a regression of `φ_a` on phase-one data so every record
//!    contributes.
//!
//! Treatment efficacy is the multiplicative contrast
//! `TE = 1 − θ₁/θ₀`, reported with `log(1 − TE) = log(θ₁/θ₀)`.
//!
//! θ estimates are intentionally not clipped to [0,1]; out-of-range values
//! surface as contrast errors instead of being masked.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use thiserror::Error;

use crate::data_model::{
    compute_design_weights, DataError, DesignWeights, HarmonizedDataset, ParticipantRecord,
    SamplingDesign, Stratum,
};
use crate::glm::{
    expit, fit_weighted_linear, fit_weighted_logistic, predict, FitResult, GlmError, Link,
};

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{context} regression failed: {source}")]
    Glm {
        context: &'static str,
        #[source]
        source: GlmError,
    },
    #[error("{context} regression did not converge (gradient norm {gradient:.3e})")]
    NotConverged { context: &'static str, gradient: f64 },
    #[error("phase 3 arm {arm} has no S-measured records")]
    EmptyArmSubset { arm: u8 },
    #[error("nonpositive risk estimates theta0={theta0:.6e}, theta1={theta1:.6e}; log(1-VE) undefined")]
    NonPositiveTheta { theta0: f64, theta1: f64 },
    #[error("bias specification must be finite (u_uc={u_uc}, u_ct={u_ct})")]
    NonFiniteBias { u_uc: f64, u_ct: f64 },
    #[error("positivity violation at {at}: {quantity} = {value:.3e}")]
    Positivity {
        at: String,
        quantity: &'static str,
        value: f64,
    },
    #[error("{at}: {reason}")]
    Record { at: String, reason: String },
    #[error("one-step machinery was not prepared; construct the pipeline with EstimatorKind::OneStep")]
    OneStepUnavailable,
    #[error("membership cell {cell} is empty among S-measured records")]
    EmptyMembershipCell { cell: &'static str },
}

fn glm_err(context: &'static str) -> impl FnOnce(GlmError) -> EstimationError {
    move |source| EstimationError::Glm { context, source }
}

/// Constant bias pair, in risk-difference units.
///
/// `u_uc` shifts the untreated transport (`g*_0 = g − u_uc`); `u_ct` encodes
/// surrogate imperfection (`g*_1 = g + u_ct − u_uc`). Positive `u_ct` enlarges
/// the treated-arm risk estimate and therefore shrinks TE, which is the
/// conservative direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasSpecification {
    pub u_uc: f64,
    pub u_ct: f64,
}

impl BiasSpecification {
    pub const ZERO: BiasSpecification = BiasSpecification { u_uc: 0.0, u_ct: 0.0 };

    pub fn new(u_uc: f64, u_ct: f64) -> Result<Self, EstimationError> {
        if !u_uc.is_finite() || !u_ct.is_finite() {
            return Err(EstimationError::NonFiniteBias { u_uc, u_ct });
        }
        Ok(Self { u_uc, u_ct })
    }

    /// Conservative analyses keep `u_ct ≥ 0`.
    pub fn is_conservative(&self) -> bool {
        self.u_ct >= 0.0
    }

    /// Additive shift applied to `g` for arm `a`.
    pub fn shift(&self, arm: u8) -> f64 {
        if arm == 1 {
            self.u_ct - self.u_uc
        } else {
            -self.u_uc
        }
    }
}

/// Which estimator of `θ_a` to report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    PlugIn,
    OneStep,
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EstimatorKind::PlugIn => write!(f, "plug-in"),
            EstimatorKind::OneStep => write!(f, "one-step"),
        }
    }
}

/// Point estimates of the arm-specific risks and the TE contrast.
#[derive(Debug, Clone)]
pub struct EffectEstimate {
    pub theta0: f64,
    pub theta1: f64,
    pub log_one_minus_ve: f64,
    pub ve: f64,
    pub method: EstimatorKind,
    pub bias: BiasSpecification,
}

/// `log(1 − VE)` and `VE` from the two arm risks. Errors when either risk is
/// nonpositive (the log contrast is undefined there), surfacing both values.
pub fn contrast_effect(theta0: f64, theta1: f64) -> Result<(f64, f64), EstimationError> {
    if theta0 <= 0.0 || theta1 <= 0.0 || !theta0.is_finite() || !theta1.is_finite() {
        return Err(EstimationError::NonPositiveTheta { theta0, theta1 });
    }
    let log_one_minus_ve = (theta1 / theta0).ln();
    Ok((log_one_minus_ve, 1.0 - theta1 / theta0))
}

/// How `P(A=1 | X, Z=0)` enters the influence function: the known
/// randomization constant, or a fitted logistic of `A` on `(1, X)`.
#[derive(Debug, Clone)]
pub enum PropensityModel {
    Known(f64),
    Fitted(FitResult),
}

impl PropensityModel {
    /// `P(A=1 | X=x, Z=0)` for a covariate row (without intercept).
    pub fn prob_a1(&self, x: &[f64]) -> f64 {
        match self {
            PropensityModel::Known(p) => *p,
            PropensityModel::Fitted(fit) => {
                let mut lp = fit.coefficients[0];
                for (j, &v) in x.iter().enumerate() {
                    lp += fit.coefficients[j + 1] * v;
                }
                expit(lp)
            }
        }
    }
}

/// Nested binary logistic models for the study/arm membership cells given
/// `(X, S)`: `P(Z=0 | X, S)` and `P(A=1 | X, S, Z=0)`.
#[derive(Debug, Clone)]
pub struct MembershipModel {
    pub z_fit: FitResult,
    pub a_fit: FitResult,
}

/// Probabilities of the three membership cells at one `(x, s)`; they sum to 1
/// by construction.
#[derive(Debug, Clone, Copy)]
pub struct CellProbabilities {
    pub obs_untreated: f64,
    pub rct_arm0: f64,
    pub rct_arm1: f64,
}

impl MembershipModel {
    pub fn cell_probabilities(&self, x: &[f64], s: &[f64]) -> CellProbabilities {
        let lp = |fit: &FitResult| {
            let mut acc = fit.coefficients[0];
            let mut j = 1;
            for &v in x {
                acc += fit.coefficients[j] * v;
                j += 1;
            }
            for &v in s {
                acc += fit.coefficients[j] * v;
                j += 1;
            }
            acc
        };
        let p_z0 = expit(lp(&self.z_fit));
        let p_a1 = expit(lp(&self.a_fit));
        CellProbabilities {
            obs_untreated: 1.0 - p_z0,
            rct_arm0: p_z0 * (1.0 - p_a1),
            rct_arm1: p_z0 * p_a1,
        }
    }
}

/// Every nuisance estimate the estimators and influence functions consume.
#[derive(Debug, Clone)]
pub struct NuisanceEstimates {
    /// Logistic fit of `Y` on `(1, S, X)` in the observational study.
    pub g_fit: FitResult,
    /// Linear fit of `ĝ*_0` on `(1, X)` in the placebo arm.
    pub mu0_fit: FitResult,
    /// Linear fit of `ĝ*_1` on `(1, X)` in the treated arm.
    pub mu1_fit: FitResult,
    /// Per-record sampling probabilities π.
    pub pi: Vec<f64>,
    /// Empirical `P(Z=0)`.
    pub p_z0: f64,
    /// `P(A=1 | X, Z=0)`.
    pub p_a1: PropensityModel,
    /// Membership cells given `(X, S)`; present for one-step fits.
    pub membership: Option<MembershipModel>,
    pub bias: BiasSpecification,
}

impl NuisanceEstimates {
    /// `ĝ(x, s)` on the probability scale.
    pub fn g_value(&self, x: &[f64], s: &[f64]) -> f64 {
        let c = &self.g_fit.coefficients;
        let mut lp = c[0];
        let mut j = 1;
        for &v in s {
            lp += c[j] * v;
            j += 1;
        }
        for &v in x {
            lp += c[j] * v;
            j += 1;
        }
        expit(lp)
    }

    /// `μ̂_a(x)`.
    pub fn mu_value(&self, arm: u8, x: &[f64]) -> f64 {
        let fit = if arm == 1 { &self.mu1_fit } else { &self.mu0_fit };
        let mut acc = fit.coefficients[0];
        for (j, &v) in x.iter().enumerate() {
            acc += fit.coefficients[j + 1] * v;
        }
        acc
    }
}

/// Pipeline configuration.
#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub bias: BiasSpecification,
    pub estimator: EstimatorKind,
    /// Randomization probability model; the phase 3 design is randomized, so
    /// the known constant 0.5 is the default.
    pub p_a1: f64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            bias: BiasSpecification::ZERO,
            estimator: EstimatorKind::PlugIn,
            p_a1: 0.5,
        }
    }
}

// ---------------------------------------------------------------------------
// Design-matrix helpers shared by the free functions and the pipeline.
// ---------------------------------------------------------------------------

fn intercept_name() -> String {
    "(intercept)".to_string()
}

fn g_column_names(d: &HarmonizedDataset) -> Vec<String> {
    let mut names = vec![intercept_name()];
    names.extend(d.surrogate_names.iter().cloned());
    names.extend(d.covariate_names.iter().cloned());
    names
}

fn x_column_names(d: &HarmonizedDataset) -> Vec<String> {
    let mut names = vec![intercept_name()];
    names.extend(d.covariate_names.iter().cloned());
    names
}

fn xs_column_names(d: &HarmonizedDataset) -> Vec<String> {
    let mut names = vec![intercept_name()];
    names.extend(d.covariate_names.iter().cloned());
    names.extend(d.surrogate_names.iter().cloned());
    names
}

/// Build `(1, S, X)` rows for the given record indices (all must be S-measured).
fn g_design_rows(d: &HarmonizedDataset, rows: &[u32]) -> DMatrix<f64> {
    let q = d.surrogate_names.len();
    let p = d.covariate_names.len();
    let mut m = DMatrix::zeros(rows.len(), 1 + q + p);
    for (i, &ri) in rows.iter().enumerate() {
        let r = &d.records[ri as usize];
        m[(i, 0)] = 1.0;
        let s = r.s.as_ref().expect("S-measured row");
        for (k, &v) in s.iter().enumerate() {
            m[(i, 1 + k)] = v;
        }
        for (k, &v) in r.x.iter().enumerate() {
            m[(i, 1 + q + k)] = v;
        }
    }
    m
}

/// Build `(1, X)` rows for the given record indices.
fn x_design_rows(d: &HarmonizedDataset, rows: &[u32]) -> DMatrix<f64> {
    let p = d.covariate_names.len();
    let mut m = DMatrix::zeros(rows.len(), 1 + p);
    for (i, &ri) in rows.iter().enumerate() {
        let r = &d.records[ri as usize];
        m[(i, 0)] = 1.0;
        for (k, &v) in r.x.iter().enumerate() {
            m[(i, 1 + k)] = v;
        }
    }
    m
}

/// Build `(1, X, S)` rows for the given record indices (all S-measured).
fn xs_design_rows(d: &HarmonizedDataset, rows: &[u32]) -> DMatrix<f64> {
    let q = d.surrogate_names.len();
    let p = d.covariate_names.len();
    let mut m = DMatrix::zeros(rows.len(), 1 + p + q);
    for (i, &ri) in rows.iter().enumerate() {
        let r = &d.records[ri as usize];
        m[(i, 0)] = 1.0;
        for (k, &v) in r.x.iter().enumerate() {
            m[(i, 1 + k)] = v;
        }
        let s = r.s.as_ref().expect("S-measured row");
        for (k, &v) in s.iter().enumerate() {
            m[(i, 1 + p + k)] = v;
        }
    }
    m
}

// ---------------------------------------------------------------------------
// Spec-level operations.
// ---------------------------------------------------------------------------

/// IPS-weighted logistic fit of `Y` on `(1, S, X)` over S-measured
/// observational records.
pub fn estimate_g(
    d: &HarmonizedDataset,
    weights: &DesignWeights,
) -> Result<FitResult, EstimationError> {
    let rows: Vec<u32> = (0..d.records.len() as u32)
        .filter(|&i| {
            let r = &d.records[i as usize];
            r.z == 1 && r.eps_s
        })
        .collect();
    let design = g_design_rows(d, &rows);
    let mut y = DVector::zeros(rows.len());
    let mut w = Vec::with_capacity(rows.len());
    for (i, &ri) in rows.iter().enumerate() {
        let r = &d.records[ri as usize];
        y[i] = r.y.ok_or_else(|| EstimationError::Record {
            at: format!("record {}", r.id),
            reason: "observational record has no derivable outcome".into(),
        })? as f64;
        w.push(weights.weight[ri as usize]);
    }
    let fit =
        fit_weighted_logistic(&design, &y, &w, g_column_names(d)).map_err(glm_err("g"))?;
    if !fit.converged {
        return Err(EstimationError::NotConverged {
            context: "g",
            gradient: fit.final_gradient_norm,
        });
    }
    Ok(fit)
}

/// Shift `g` values by the constant bias pair for the given arm:
/// arm 0 subtracts `u_uc`, arm 1 adds `u_ct − u_uc`.
pub fn apply_bias(g_values: &[f64], bias: &BiasSpecification, arm: u8) -> Vec<f64> {
    let shift = bias.shift(arm);
    g_values.iter().map(|g| g + shift).collect()
}

/// IPS-weighted linear regression of `ĝ*_a` on `(1, X)` over S-measured
/// phase 3 records in the given arm. `g_star_values` is record-aligned; only
/// entries on that subset are read.
pub fn fit_outer_mean(
    d: &HarmonizedDataset,
    g_star_values: &[f64],
    arm: u8,
    weights: &DesignWeights,
) -> Result<FitResult, EstimationError> {
    let rows: Vec<u32> = (0..d.records.len() as u32)
        .filter(|&i| {
            let r = &d.records[i as usize];
            r.z == 0 && r.a == arm && r.eps_s
        })
        .collect();
    if rows.is_empty() {
        return Err(EstimationError::EmptyArmSubset { arm });
    }
    let design = x_design_rows(d, &rows);
    let mut y = DVector::zeros(rows.len());
    let mut w = Vec::with_capacity(rows.len());
    for (i, &ri) in rows.iter().enumerate() {
        y[i] = g_star_values[ri as usize];
        w.push(weights.weight[ri as usize]);
    }
    fit_weighted_linear(&design, &y, &w, x_column_names(d)).map_err(glm_err("outer mean"))
}

/// `θ̂_a = (1/n_RCT) Σ over all Z=0 records of μ̂_a(X_i)`.
pub fn plug_in_estimate(
    d: &HarmonizedDataset,
    nuis: &NuisanceEstimates,
    arm: u8,
) -> Result<f64, EstimationError> {
    if d.n_rct == 0 {
        return Err(EstimationError::EmptyArmSubset { arm });
    }
    let mut acc = 0.0;
    for r in &d.records {
        if r.z == 0 {
            acc += nuis.mu_value(arm, &r.x);
        }
    }
    Ok(acc / d.n_rct as f64)
}

/// Fit the membership cells `P(Z=0, A=a | X, S)` and `P(Z=1, A=0 | X, S)` as
/// two nested IPS-weighted logistics over S-measured records.
pub fn fit_membership_model(
    d: &HarmonizedDataset,
    weights: &DesignWeights,
) -> Result<MembershipModel, EstimationError> {
    let rows: Vec<u32> = (0..d.records.len() as u32)
        .filter(|&i| d.records[i as usize].eps_s)
        .collect();
    let mut cells = [0usize; 3];
    for &ri in &rows {
        let r = &d.records[ri as usize];
        let cell = if r.z == 1 { 0 } else if r.a == 0 { 1 } else { 2 };
        cells[cell] += 1;
    }
    for (count, name) in cells.iter().zip(["(z=1,a=0)", "(z=0,a=0)", "(z=0,a=1)"]) {
        if *count == 0 {
            return Err(EstimationError::EmptyMembershipCell { cell: name });
        }
    }
    let design = xs_design_rows(d, &rows);
    let mut z_resp = DVector::zeros(rows.len());
    let mut w = Vec::with_capacity(rows.len());
    for (i, &ri) in rows.iter().enumerate() {
        let r = &d.records[ri as usize];
        z_resp[i] = (r.z == 0) as u8 as f64;
        w.push(weights.weight[ri as usize]);
    }
    let z_fit = fit_weighted_logistic(&design, &z_resp, &w, xs_column_names(d))
        .map_err(glm_err("membership z"))?;

    let z0_rows: Vec<u32> = rows
        .iter()
        .copied()
        .filter(|&ri| d.records[ri as usize].z == 0)
        .collect();
    let a_design = xs_design_rows(d, &z0_rows);
    let mut a_resp = DVector::zeros(z0_rows.len());
    let mut aw = Vec::with_capacity(z0_rows.len());
    for (i, &ri) in z0_rows.iter().enumerate() {
        a_resp[i] = d.records[ri as usize].a as f64;
        aw.push(weights.weight[ri as usize]);
    }
    let a_fit = fit_weighted_logistic(&a_design, &a_resp, &aw, xs_column_names(d))
        .map_err(glm_err("membership a"))?;
    Ok(MembershipModel { z_fit, a_fit })
}

/// Shared evaluation of the complete-data influence function `φ_a` from plain
/// scalars; single source of truth for both the record-level operation and
/// the vectorized pipeline.
#[allow(clippy::too_many_arguments)]
fn phi_complete(
    z: u8,
    a: u8,
    y: f64,
    g_star: f64,
    mu: f64,
    theta: f64,
    p_z0: f64,
    p_a_arm: f64,
    cells: &CellProbabilities,
    arm: u8,
    bias: &BiasSpecification,
) -> f64 {
    let mut phi = 0.0;
    if z == 1 && a == 0 {
        let cell_arm = if arm == 1 { cells.rct_arm1 } else { cells.rct_arm0 };
        let odds = cell_arm / cells.obs_untreated;
        let numerator = y + f64::from(arm) * bias.u_ct - bias.u_uc - g_star;
        phi += odds * numerator / (p_z0 * p_a_arm);
    }
    if z == 0 {
        if a == arm {
            phi += (g_star - mu) / (p_z0 * p_a_arm);
        }
        phi += (mu - theta) / p_z0;
    }
    phi
}

/// Evaluate the complete-data EIF `φ_a` at one S-measured record, using the
/// plug-in `θ_a`. Probabilities outside `(0,1)` are surfaced as positivity
/// errors, never clipped.
pub fn eif_complete(
    record: &ParticipantRecord,
    nuis: &NuisanceEstimates,
    arm: u8,
    theta_arm: f64,
) -> Result<f64, EstimationError> {
    let membership = nuis
        .membership
        .as_ref()
        .ok_or(EstimationError::OneStepUnavailable)?;
    let s = record.s.as_deref().ok_or_else(|| EstimationError::Record {
        at: format!("record {}", record.id),
        reason: "eif_complete requires an S-measured record".into(),
    })?;
    let cells = membership.cell_probabilities(&record.x, s);
    let checks: [(&'static str, f64); 5] = [
        ("P(Z=1,A=0|X,S)", cells.obs_untreated),
        ("P(Z=0,A=0|X,S)", cells.rct_arm0),
        ("P(Z=0,A=1|X,S)", cells.rct_arm1),
        ("P(Z=0)", nuis.p_z0),
        ("P(A=a|X,Z=0)", prob_a_arm(&nuis.p_a1, &record.x, arm)),
    ];
    for (name, v) in checks {
        if !(v > 0.0 && v < 1.0) {
            return Err(EstimationError::Positivity {
                at: format!("record {}", record.id),
                quantity: name,
                value: v,
            });
        }
    }
    let g_star = nuis.g_value(&record.x, s) + nuis.bias.shift(arm);
    let mu = nuis.mu_value(arm, &record.x);
    let y = record.y.map(f64::from).unwrap_or(0.0);
    Ok(phi_complete(
        record.z,
        record.a,
        y,
        g_star,
        mu,
        theta_arm,
        nuis.p_z0,
        prob_a_arm(&nuis.p_a1, &record.x, arm),
        &cells,
        arm,
        &nuis.bias,
    ))
}

fn prob_a_arm(model: &PropensityModel, x: &[f64], arm: u8) -> f64 {
    let p1 = model.prob_a1(x);
    if arm == 1 {
        p1
    } else {
        1.0 - p1
    }
}

/// Combine `φ_a` with its regression on phase-one data into the observed-data
/// influence function: `(ε/π)·φ + (1 − ε/π)·proj`, with the `φ` term dropped
/// for records without a measured surrogate.
///
/// `phi` is record-aligned and read only where `eps_s = 1`. The projection is
/// an IPS-weighted linear regression of `φ_a` on `(1, X, Z, A, Y)` among
/// S-measured records, predicted for every record.
pub fn project_eif(
    d: &HarmonizedDataset,
    phi: &[f64],
    nuis: &NuisanceEstimates,
) -> Result<Vec<f64>, EstimationError> {
    let n = d.records.len();
    // Complete measurement: the combination collapses to φ itself.
    if d.records.iter().enumerate().all(|(i, r)| r.eps_s && nuis.pi[i] == 1.0) {
        return Ok(phi.to_vec());
    }
    let eps_rows: Vec<u32> = (0..n as u32)
        .filter(|&i| d.records[i as usize].eps_s)
        .collect();
    let p = d.covariate_names.len();
    let width = 1 + p + 3;
    let build_row = |m: &mut DMatrix<f64>, i: usize, r: &ParticipantRecord| {
        m[(i, 0)] = 1.0;
        for (k, &v) in r.x.iter().enumerate() {
            m[(i, 1 + k)] = v;
        }
        m[(i, 1 + p)] = r.z as f64;
        m[(i, 2 + p)] = r.a as f64;
        m[(i, 3 + p)] = r.y.map(f64::from).unwrap_or(0.0);
    };
    let mut design = DMatrix::zeros(eps_rows.len(), width);
    let mut resp = DVector::zeros(eps_rows.len());
    let mut w = Vec::with_capacity(eps_rows.len());
    for (i, &ri) in eps_rows.iter().enumerate() {
        build_row(&mut design, i, &d.records[ri as usize]);
        resp[i] = phi[ri as usize];
        w.push(1.0 / nuis.pi[ri as usize]);
    }
    let mut names = x_column_names(d);
    names.extend(["z".to_string(), "a".to_string(), "y".to_string()]);
    let fit = fit_weighted_linear(&design, &resp, &w, names).map_err(glm_err("EIF projection"))?;

    let mut all = DMatrix::zeros(n, width);
    for (i, r) in d.records.iter().enumerate() {
        build_row(&mut all, i, r);
    }
    let proj = predict(&fit, &all, Link::Identity).map_err(glm_err("EIF projection"))?;
    let mut out = Vec::with_capacity(n);
    for (i, r) in d.records.iter().enumerate() {
        let ratio = if r.eps_s { 1.0 / nuis.pi[i] } else { 0.0 };
        let phi_term = if r.eps_s { ratio * phi[i] } else { 0.0 };
        out.push(phi_term + (1.0 - ratio) * proj[i]);
    }
    Ok(out)
}

/// One-step estimator: the plug-in value plus the mean projected EIF.
pub fn one_step_estimate(plug_in: f64, projected_eif: &[f64]) -> f64 {
    let n = projected_eif.len() as f64;
    plug_in + projected_eif.iter().sum::<f64>() / n
}

// ---------------------------------------------------------------------------
// Pipeline: frames extracted once, reused across bias points and resamples.
// ---------------------------------------------------------------------------

/// Compact columnar views of the dataset used by the fitting hot paths.
#[derive(Debug)]
pub(crate) struct Frames {
    pub n: usize,
    pub n_rct: usize,
    /// Record indices per stratum (cases, controls, arm 0, arm 1).
    pub stratum_records: [Vec<u32>; 4],
    /// Count of S-measured records per stratum.
    pub stratum_eps: [usize; 4],
    /// Per-record sampling probability π aligned with the dataset.
    pub pi: Vec<f64>,
    // g block: S-measured observational rows, cases first.
    pub g_design: DMatrix<f64>,
    pub g_y: DVector<f64>,
    pub g_w: Vec<f64>,
    pub g_records: Vec<u32>,
    pub g_case_rows: usize,
    pub g_names: Vec<String>,
    // Phase 3 block: all Z=0 rows, arm 0 first.
    pub rct_records: Vec<u32>,
    pub rct_x: DMatrix<f64>,
    pub rct_arm0_rows: usize,
    // Outer-regression blocks per arm (S-measured Z=0 rows).
    pub outer_x: [DMatrix<f64>; 2],
    pub outer_gx: [DMatrix<f64>; 2],
    pub outer_w: [Vec<f64>; 2],
    /// Positions of the outer rows inside the rct block, per arm.
    pub outer_pos: [Vec<u32>; 2],
    pub x_names: Vec<String>,
    // One-step extras (present when built with EstimatorKind::OneStep).
    pub onestep: Option<OneStepFrames>,
}

/// Extra frames needed by the EIF machinery.
#[derive(Debug)]
pub(crate) struct OneStepFrames {
    /// All S-measured records, dataset order.
    pub eps_records: Vec<u32>,
    pub eps_gx: DMatrix<f64>,
    pub eps_xs: DMatrix<f64>,
    pub eps_x: DMatrix<f64>,
    pub eps_w: Vec<f64>,
    pub eps_z: Vec<u8>,
    pub eps_a: Vec<u8>,
    pub eps_y: Vec<f64>,
    pub xs_names: Vec<String>,
    /// Projection design `(1, X, Z, A, Y)` over every record.
    pub proj_design: DMatrix<f64>,
    pub proj_names: Vec<String>,
}

/// A fully fitted pipeline run.
#[derive(Debug, Clone)]
pub struct TransportFit {
    pub nuisance: NuisanceEstimates,
    pub plug_in: EffectEstimate,
    pub one_step: Option<EffectEstimate>,
    /// Record-aligned projected EIF per arm, for the EIF variance.
    pub projected_eif: Option<[Vec<f64>; 2]>,
}

impl TransportFit {
    /// The estimate of the kind the pipeline was configured for.
    pub fn effect(&self) -> &EffectEstimate {
        self.one_step.as_ref().unwrap_or(&self.plug_in)
    }
}

/// Point estimates from one stratified bootstrap resample.
#[derive(Debug, Clone, Copy)]
pub struct BootstrapDraw {
    pub theta0: f64,
    pub theta1: f64,
    pub log_one_minus_ve: f64,
}

/// Orchestrates the full transport estimation on one dataset. Construction
/// extracts columnar frames once; fitting, bias sweeps, and bootstrap
/// resampling reuse them.
pub struct TransportPipeline {
    opts: PipelineOptions,
    pub(crate) frames: Frames,
}

impl TransportPipeline {
    pub fn new(
        d: &HarmonizedDataset,
        design: &SamplingDesign,
        opts: PipelineOptions,
    ) -> Result<Self, EstimationError> {
        BiasSpecification::new(opts.bias.u_uc, opts.bias.u_ct)?;
        let weights = compute_design_weights(d, design)?;
        let frames = Frames::extract(d, &weights, opts.estimator)?;
        Ok(Self { opts, frames })
    }

    pub fn options(&self) -> &PipelineOptions {
        &self.opts
    }

    pub fn n(&self) -> usize {
        self.frames.n
    }

    /// Run the configured estimator at the configured bias.
    pub fn fit(&self) -> Result<TransportFit, EstimationError> {
        self.fit_with_bias(&self.opts.bias)
    }

    /// Run the configured estimator at an alternative bias point (grid sweeps
    /// reuse the extracted frames and refit from there).
    pub fn fit_with_bias(&self, bias: &BiasSpecification) -> Result<TransportFit, EstimationError> {
        let bias = BiasSpecification::new(bias.u_uc, bias.u_ct)?;
        let f = &self.frames;
        let g_fit = fit_weighted_logistic(&f.g_design, &f.g_y, &f.g_w, f.g_names.clone())
            .map_err(glm_err("g"))?;
        if !g_fit.converged {
            return Err(EstimationError::NotConverged {
                context: "g",
                gradient: g_fit.final_gradient_norm,
            });
        }
        let (mu_fits, theta_plug) = self.outer_and_plug_in(&g_fit, &bias, None)?;
        let [mu0_fit, mu1_fit] = mu_fits;
        let (log1mve, ve) = contrast_effect(theta_plug[0], theta_plug[1])?;
        let mut nuisance = NuisanceEstimates {
            g_fit,
            mu0_fit,
            mu1_fit,
            pi: f.pi.clone(),
            p_z0: f.n_rct as f64 / f.n as f64,
            p_a1: PropensityModel::Known(self.opts.p_a1),
            membership: None,
            bias,
        };
        let plug_in = EffectEstimate {
            theta0: theta_plug[0],
            theta1: theta_plug[1],
            log_one_minus_ve: log1mve,
            ve,
            method: EstimatorKind::PlugIn,
            bias,
        };
        let (one_step, projected) = if self.opts.estimator == EstimatorKind::OneStep {
            let (est, proj) = self.one_step(&mut nuisance, &theta_plug)?;
            (Some(est), Some(proj))
        } else {
            (None, None)
        };
        Ok(TransportFit {
            nuisance,
            plug_in,
            one_step,
            projected_eif: projected,
        })
    }

    /// Fit the outer means and compute the plug-in estimates, optionally with
    /// resample multiplicities (record-aligned counts).
    fn outer_and_plug_in(
        &self,
        g_fit: &FitResult,
        bias: &BiasSpecification,
        counts: Option<&[u32]>,
    ) -> Result<([FitResult; 2], [f64; 2]), EstimationError> {
        let f = &self.frames;
        let mut mu_fits = Vec::with_capacity(2);
        for arm in 0..2usize {
            let g_hat = predict(g_fit, &f.outer_gx[arm], Link::Logit).map_err(glm_err("g"))?;
            let shift = bias.shift(arm as u8);
            let response = g_hat.map(|v| v + shift);
            let w: Vec<f64> = match counts {
                None => f.outer_w[arm].clone(),
                Some(cnt) => f.outer_w[arm]
                    .iter()
                    .zip(&f.outer_pos[arm])
                    .map(|(w, &pos)| {
                        let rec = f.rct_records[pos as usize] as usize;
                        w * cnt[rec] as f64
                    })
                    .collect(),
            };
            if w.iter().all(|&v| v == 0.0) {
                return Err(EstimationError::EmptyArmSubset { arm: arm as u8 });
            }
            let fit = fit_weighted_linear(&f.outer_x[arm], &response, &w, f.x_names.clone())
                .map_err(glm_err("outer mean"))?;
            mu_fits.push(fit);
        }
        let mu_fits: [FitResult; 2] = [mu_fits.remove(0), mu_fits.remove(0)];

        // Plug-in average of μ̂_a over every phase 3 record (both arms).
        let mut theta = [0.0f64; 2];
        for (arm, fit) in mu_fits.iter().enumerate() {
            let preds = predict(fit, &f.rct_x, Link::Identity).map_err(glm_err("outer mean"))?;
            match counts {
                None => theta[arm] = preds.sum() / f.n_rct as f64,
                Some(cnt) => {
                    let mut acc = 0.0;
                    let mut total = 0u64;
                    for (i, &rec) in f.rct_records.iter().enumerate() {
                        let c = cnt[rec as usize] as f64;
                        acc += c * preds[i];
                        total += cnt[rec as usize] as u64;
                    }
                    theta[arm] = acc / total as f64;
                }
            }
        }
        Ok((mu_fits, theta))
    }

    /// EIF machinery: membership fits, complete-data φ over S-measured rows,
    /// projection onto phase-one data, and the corrected estimates.
    fn one_step(
        &self,
        nuisance: &mut NuisanceEstimates,
        theta_plug: &[f64; 2],
    ) -> Result<(EffectEstimate, [Vec<f64>; 2]), EstimationError> {
        let f = &self.frames;
        let os = f.onestep.as_ref().ok_or(EstimationError::OneStepUnavailable)?;
        // Membership cells among S-measured rows.
        for (cell, name) in [(0usize, "(z=1,a=0)"), (1, "(z=0,a=0)"), (2, "(z=0,a=1)")] {
            let count = os
                .eps_z
                .iter()
                .zip(&os.eps_a)
                .filter(|(&z, &a)| {
                    (if z == 1 { 0 } else if a == 0 { 1 } else { 2 }) == cell
                })
                .count();
            if count == 0 {
                return Err(EstimationError::EmptyMembershipCell { cell: name });
            }
        }
        let z_resp = DVector::from_iterator(
            os.eps_z.len(),
            os.eps_z.iter().map(|&z| (z == 0) as u8 as f64),
        );
        let z_fit = fit_weighted_logistic(&os.eps_xs, &z_resp, &os.eps_w, os.xs_names.clone())
            .map_err(glm_err("membership z"))?;
        // Second stage restricted to Z=0 rows via zero weights elsewhere.
        let a_resp = DVector::from_iterator(os.eps_a.len(), os.eps_a.iter().map(|&a| a as f64));
        let a_w: Vec<f64> = os
            .eps_w
            .iter()
            .zip(&os.eps_z)
            .map(|(&w, &z)| if z == 0 { w } else { 0.0 })
            .collect();
        let a_fit = fit_weighted_logistic(&os.eps_xs, &a_resp, &a_w, os.xs_names.clone())
            .map_err(glm_err("membership a"))?;
        nuisance.membership = Some(MembershipModel { z_fit, a_fit });
        let membership = nuisance.membership.as_ref().unwrap();

        let g_hat = predict(&nuisance.g_fit, &os.eps_gx, Link::Logit).map_err(glm_err("g"))?;
        let z_probs = predict(&membership.z_fit, &os.eps_xs, Link::Logit)
            .map_err(glm_err("membership z"))?;
        let a_probs = predict(&membership.a_fit, &os.eps_xs, Link::Logit)
            .map_err(glm_err("membership a"))?;
        let mu_preds = [
            predict(&nuisance.mu0_fit, &os.eps_x, Link::Identity).map_err(glm_err("outer mean"))?,
            predict(&nuisance.mu1_fit, &os.eps_x, Link::Identity).map_err(glm_err("outer mean"))?,
        ];
        let p_z0 = nuisance.p_z0;
        let p_a1 = self.opts.p_a1;
        if !(p_a1 > 0.0 && p_a1 < 1.0) {
            return Err(EstimationError::Positivity {
                at: "pipeline options".into(),
                quantity: "P(A=1|X,Z=0)",
                value: p_a1,
            });
        }

        let m = os.eps_records.len();
        let mut phi = [vec![0.0; m], vec![0.0; m]];
        for i in 0..m {
            let p_z0_xs = z_probs[i];
            if !(p_z0_xs > 0.0 && p_z0_xs < 1.0) {
                return Err(EstimationError::Positivity {
                    at: format!("record index {}", os.eps_records[i]),
                    quantity: "P(Z=0|X,S)",
                    value: p_z0_xs,
                });
            }
            let p_a1_xs = a_probs[i];
            if !(p_a1_xs > 0.0 && p_a1_xs < 1.0) {
                return Err(EstimationError::Positivity {
                    at: format!("record index {}", os.eps_records[i]),
                    quantity: "P(A=1|X,S,Z=0)",
                    value: p_a1_xs,
                });
            }
            let cells = CellProbabilities {
                obs_untreated: 1.0 - p_z0_xs,
                rct_arm0: p_z0_xs * (1.0 - p_a1_xs),
                rct_arm1: p_z0_xs * p_a1_xs,
            };
            for arm in 0..2u8 {
                let g_star = g_hat[i] + nuisance.bias.shift(arm);
                let p_a_arm = if arm == 1 { p_a1 } else { 1.0 - p_a1 };
                phi[arm as usize][i] = phi_complete(
                    os.eps_z[i],
                    os.eps_a[i],
                    os.eps_y[i],
                    g_star,
                    mu_preds[arm as usize][i],
                    theta_plug[arm as usize],
                    p_z0,
                    p_a_arm,
                    &cells,
                    arm,
                    &nuisance.bias,
                );
            }
        }

        let projected = [
            self.project(os, &phi[0])?,
            self.project(os, &phi[1])?,
        ];
        let theta0 = one_step_estimate(theta_plug[0], &projected[0]);
        let theta1 = one_step_estimate(theta_plug[1], &projected[1]);
        let (log1mve, ve) = contrast_effect(theta0, theta1)?;
        Ok((
            EffectEstimate {
                theta0,
                theta1,
                log_one_minus_ve: log1mve,
                ve,
                method: EstimatorKind::OneStep,
                bias: nuisance.bias,
            },
            projected,
        ))
    }

    /// Projection step of the observed-data EIF over the pipeline frames.
    fn project(&self, os: &OneStepFrames, phi: &[f64]) -> Result<Vec<f64>, EstimationError> {
        let f = &self.frames;
        let complete = os
            .eps_records
            .iter()
            .enumerate()
            .all(|(i, &r)| f.pi[r as usize] == 1.0 && i == r as usize)
            && os.eps_records.len() == f.n;
        if complete {
            return Ok(phi.to_vec());
        }
        let m = os.eps_records.len();
        let width = os.proj_design.ncols();
        let mut design = DMatrix::zeros(m, width);
        for (i, &r) in os.eps_records.iter().enumerate() {
            for j in 0..width {
                design[(i, j)] = os.proj_design[(r as usize, j)];
            }
        }
        let resp = DVector::from_column_slice(phi);
        let fit = fit_weighted_linear(&design, &resp, &os.eps_w, os.proj_names.clone())
            .map_err(glm_err("EIF projection"))?;
        let proj =
            predict(&fit, &os.proj_design, Link::Identity).map_err(glm_err("EIF projection"))?;
        let mut out = vec![0.0; f.n];
        for i in 0..f.n {
            out[i] = proj[i];
        }
        for (i, &r) in os.eps_records.iter().enumerate() {
            let ratio = 1.0 / f.pi[r as usize];
            out[r as usize] = ratio * phi[i] + (1.0 - ratio) * proj[r as usize];
        }
        Ok(out)
    }

    /// One stratified bootstrap replicate: resample records with replacement
    /// within the four strata at their original sizes, rerun the estimation
    /// pipeline, and return the point estimates.
    pub fn bootstrap_replicate(
        &self,
        rng: &mut ChaCha8Rng,
        counts: &mut Vec<u32>,
    ) -> Result<BootstrapDraw, EstimationError> {
        self.bootstrap_replicate_with_bias(&self.opts.bias, rng, counts)
    }

    /// Bootstrap replicate at an alternative bias point (used by grid sweeps).
    pub fn bootstrap_replicate_with_bias(
        &self,
        bias: &BiasSpecification,
        rng: &mut ChaCha8Rng,
        counts: &mut Vec<u32>,
    ) -> Result<BootstrapDraw, EstimationError> {
        let f = &self.frames;
        counts.resize(f.n, 0);
        match self.opts.estimator {
            EstimatorKind::PlugIn => self.resample_counts_plug_in(rng, counts),
            EstimatorKind::OneStep => self.resample_counts_full(rng, counts),
        }

        // g fit with multiplicity-scaled weights, warm-started at a cold
        // intercept (the resampled fit solves its own score equations).
        let g_w: Vec<f64> = f
            .g_w
            .iter()
            .zip(&f.g_records)
            .map(|(w, &rec)| w * counts[rec as usize] as f64)
            .collect();
        let g_fit = fit_weighted_logistic(&f.g_design, &f.g_y, &g_w, f.g_names.clone())
            .map_err(glm_err("g"))?;
        if !g_fit.converged {
            return Err(EstimationError::NotConverged {
                context: "g",
                gradient: g_fit.final_gradient_norm,
            });
        }
        let (mu_fits, theta_plug) = self.outer_and_plug_in(&g_fit, bias, Some(counts))?;
        // The one-step correction under resampling needs the full EIF path.
        let (theta0, theta1) = if self.opts.estimator == EstimatorKind::OneStep {
            self.bootstrap_one_step(&g_fit, mu_fits, &theta_plug, bias, counts)?
        } else {
            (theta_plug[0], theta_plug[1])
        };
        let (log1mve, _) = contrast_effect(theta0, theta1)?;
        Ok(BootstrapDraw {
            theta0,
            theta1,
            log_one_minus_ve: log1mve,
        })
    }

    /// Resample multiplicities for the plug-in pipeline. Unsampled
    /// observational controls enter that pipeline only through fixed stratum
    /// counts, so their multiplicities are never materialized: the number of
    /// S-measured stratum members drawn is Binomial(N, m/N), and those draws
    /// are uniform over the m S-measured rows — the exact conditional law of
    /// a full with-replacement resample of the stratum.
    fn resample_counts_plug_in(&self, rng: &mut ChaCha8Rng, counts: &mut [u32]) {
        let f = &self.frames;
        // Reset only the entries this resampler can touch.
        for &rec in &f.g_records {
            counts[rec as usize] = 0;
        }
        for &rec in &f.rct_records {
            counts[rec as usize] = 0;
        }
        // Observational strata: only S-measured rows matter.
        for stratum in 0..2usize {
            let total = f.stratum_records[stratum].len();
            let measured = f.stratum_eps[stratum];
            if total == 0 {
                continue;
            }
            let draws = if measured == total {
                total as u64
            } else {
                Binomial::new(total as u64, measured as f64 / total as f64)
                    .expect("valid binomial")
                    .sample(rng)
            };
            let eps_rows: &[u32] = &f.g_records[if stratum == 0 {
                0..f.g_case_rows
            } else {
                f.g_case_rows..f.g_records.len()
            }];
            if eps_rows.is_empty() {
                continue;
            }
            for _ in 0..draws {
                let pick = eps_rows[rng.random_range(0..eps_rows.len())];
                counts[pick as usize] += 1;
            }
        }
        // Phase 3 arms: every row matters for the plug-in average.
        self.resample_rct(rng, counts);
    }

    fn resample_rct(&self, rng: &mut ChaCha8Rng, counts: &mut [u32]) {
        let f = &self.frames;
        let arm0 = &f.rct_records[..f.rct_arm0_rows];
        let arm1 = &f.rct_records[f.rct_arm0_rows..];
        for arm_rows in [arm0, arm1] {
            for _ in 0..arm_rows.len() {
                let pick = arm_rows[rng.random_range(0..arm_rows.len())];
                counts[pick as usize] += 1;
            }
        }
    }

    /// Full-stratum resample (every record can appear), needed when the
    /// one-step projection must be averaged over unsampled records too.
    fn resample_counts_full(&self, rng: &mut ChaCha8Rng, counts: &mut [u32]) {
        counts.iter_mut().for_each(|c| *c = 0);
        let f = &self.frames;
        for stratum in 0..2usize {
            let rows = &f.stratum_records[stratum];
            for _ in 0..rows.len() {
                let pick = rows[rng.random_range(0..rows.len())];
                counts[pick as usize] += 1;
            }
        }
        self.resample_rct(rng, counts);
    }

    fn bootstrap_one_step(
        &self,
        g_fit: &FitResult,
        mu_fits: [FitResult; 2],
        theta_plug: &[f64; 2],
        bias: &BiasSpecification,
        counts: &[u32],
    ) -> Result<(f64, f64), EstimationError> {
        let f = &self.frames;
        let os = f.onestep.as_ref().ok_or(EstimationError::OneStepUnavailable)?;
        let [mu0_fit, mu1_fit] = mu_fits;
        let mut nuisance = NuisanceEstimates {
            g_fit: g_fit.clone(),
            mu0_fit,
            mu1_fit,
            pi: f.pi.clone(),
            p_z0: f.n_rct as f64 / f.n as f64,
            p_a1: PropensityModel::Known(self.opts.p_a1),
            membership: None,
            bias: *bias,
        };
        // Membership with multiplicity-scaled weights.
        let z_resp = DVector::from_iterator(
            os.eps_z.len(),
            os.eps_z.iter().map(|&z| (z == 0) as u8 as f64),
        );
        let memb_w: Vec<f64> = os
            .eps_w
            .iter()
            .zip(&os.eps_records)
            .map(|(w, &rec)| w * counts[rec as usize] as f64)
            .collect();
        let z_fit = fit_weighted_logistic(&os.eps_xs, &z_resp, &memb_w, os.xs_names.clone())
            .map_err(glm_err("membership z"))?;
        let a_resp = DVector::from_iterator(os.eps_a.len(), os.eps_a.iter().map(|&a| a as f64));
        let a_w: Vec<f64> = memb_w
            .iter()
            .zip(&os.eps_z)
            .map(|(&w, &z)| if z == 0 { w } else { 0.0 })
            .collect();
        let a_fit = fit_weighted_logistic(&os.eps_xs, &a_resp, &a_w, os.xs_names.clone())
            .map_err(glm_err("membership a"))?;
        nuisance.membership = Some(MembershipModel { z_fit, a_fit });
        let membership = nuisance.membership.as_ref().unwrap();

        let g_hat = predict(&nuisance.g_fit, &os.eps_gx, Link::Logit).map_err(glm_err("g"))?;
        let z_probs = predict(&membership.z_fit, &os.eps_xs, Link::Logit)
            .map_err(glm_err("membership z"))?;
        let a_probs = predict(&membership.a_fit, &os.eps_xs, Link::Logit)
            .map_err(glm_err("membership a"))?;
        let mu_preds = [
            predict(&nuisance.mu0_fit, &os.eps_x, Link::Identity).map_err(glm_err("outer mean"))?,
            predict(&nuisance.mu1_fit, &os.eps_x, Link::Identity).map_err(glm_err("outer mean"))?,
        ];
        let m = os.eps_records.len();
        let mut theta = [0.0f64; 2];
        for arm in 0..2u8 {
            let mut phi = vec![0.0; m];
            for i in 0..m {
                let p_z0_xs = z_probs[i];
                let p_a1_xs = a_probs[i];
                if !(p_z0_xs > 0.0 && p_z0_xs < 1.0) || !(p_a1_xs > 0.0 && p_a1_xs < 1.0) {
                    return Err(EstimationError::Positivity {
                        at: format!("record index {}", os.eps_records[i]),
                        quantity: "membership probability",
                        value: p_z0_xs.min(p_a1_xs),
                    });
                }
                let cells = CellProbabilities {
                    obs_untreated: 1.0 - p_z0_xs,
                    rct_arm0: p_z0_xs * (1.0 - p_a1_xs),
                    rct_arm1: p_z0_xs * p_a1_xs,
                };
                let g_star = g_hat[i] + nuisance.bias.shift(arm);
                let p_a_arm = if arm == 1 { self.opts.p_a1 } else { 1.0 - self.opts.p_a1 };
                phi[i] = phi_complete(
                    os.eps_z[i],
                    os.eps_a[i],
                    os.eps_y[i],
                    g_star,
                    mu_preds[arm as usize][i],
                    theta_plug[arm as usize],
                    nuisance.p_z0,
                    p_a_arm,
                    &cells,
                    arm,
                    &nuisance.bias,
                );
            }
            // Weighted projection, then the multiplicity-weighted mean of the
            // combined influence function over the resampled records.
            let width = os.proj_design.ncols();
            let mut design = DMatrix::zeros(m, width);
            for (i, &r) in os.eps_records.iter().enumerate() {
                for j in 0..width {
                    design[(i, j)] = os.proj_design[(r as usize, j)];
                }
            }
            let resp = DVector::from_column_slice(&phi);
            let fit = fit_weighted_linear(&design, &resp, &memb_w, os.proj_names.clone())
                .map_err(glm_err("EIF projection"))?;
            let proj = predict(&fit, &os.proj_design, Link::Identity)
                .map_err(glm_err("EIF projection"))?;
            let mut acc = 0.0;
            let mut total = 0u64;
            for rec in 0..f.n {
                let c = counts[rec];
                if c > 0 {
                    acc += c as f64 * proj[rec];
                    total += c as u64;
                }
            }
            for (i, &r) in os.eps_records.iter().enumerate() {
                let c = counts[r as usize];
                if c > 0 {
                    let ratio = 1.0 / f.pi[r as usize];
                    acc += c as f64 * (ratio * phi[i] + (1.0 - ratio) * proj[r as usize] - proj[r as usize]);
                }
            }
            theta[arm as usize] = theta_plug[arm as usize] + acc / total as f64;
        }
        // theta_plug here is from the resample, so the correction is added to
        // the resampled plug-in values.
        Ok((theta[0], theta[1]))
    }
}

impl Frames {
    fn extract(
        d: &HarmonizedDataset,
        weights: &DesignWeights,
        estimator: EstimatorKind,
    ) -> Result<Self, EstimationError> {
        let n = d.records.len();
        let mut stratum_records: [Vec<u32>; 4] = Default::default();
        let mut stratum_eps = [0usize; 4];
        for (i, r) in d.records.iter().enumerate() {
            let s = weights.stratum[i].index();
            stratum_records[s].push(i as u32);
            if r.eps_s {
                stratum_eps[s] += 1;
            }
        }
        // g block: S-measured observational records, cases first.
        let mut g_records: Vec<u32> = Vec::new();
        for stratum in [Stratum::ObsCase, Stratum::ObsControl] {
            for &i in &stratum_records[stratum.index()] {
                if d.records[i as usize].eps_s {
                    g_records.push(i);
                }
            }
        }
        let g_case_rows = stratum_eps[Stratum::ObsCase.index()];
        let g_design = g_design_rows(d, &g_records);
        let mut g_y = DVector::zeros(g_records.len());
        let mut g_w = Vec::with_capacity(g_records.len());
        for (row, &i) in g_records.iter().enumerate() {
            let r = &d.records[i as usize];
            g_y[row] = r.y.ok_or_else(|| EstimationError::Record {
                at: format!("record {}", r.id),
                reason: "observational record has no derivable outcome".into(),
            })? as f64;
            g_w.push(weights.weight[i as usize]);
        }

        // Phase 3 block: all Z=0 rows, arm 0 first.
        let mut rct_records: Vec<u32> = Vec::new();
        rct_records.extend(&stratum_records[Stratum::RctArm0.index()]);
        let rct_arm0_rows = rct_records.len();
        rct_records.extend(&stratum_records[Stratum::RctArm1.index()]);
        let rct_x = x_design_rows(d, &rct_records);

        let mut outer_x = Vec::with_capacity(2);
        let mut outer_gx = Vec::with_capacity(2);
        let mut outer_w = Vec::with_capacity(2);
        let mut outer_pos = Vec::with_capacity(2);
        for arm in 0..2usize {
            let range = if arm == 0 {
                0..rct_arm0_rows
            } else {
                rct_arm0_rows..rct_records.len()
            };
            let mut pos = Vec::new();
            let mut rows = Vec::new();
            for idx in range {
                let rec = rct_records[idx];
                if d.records[rec as usize].eps_s {
                    pos.push(idx as u32);
                    rows.push(rec);
                }
            }
            if rows.is_empty() {
                return Err(EstimationError::EmptyArmSubset { arm: arm as u8 });
            }
            outer_x.push(x_design_rows(d, &rows));
            outer_gx.push(g_design_rows(d, &rows));
            outer_w.push(rows.iter().map(|&i| weights.weight[i as usize]).collect());
            outer_pos.push(pos);
        }

        let onestep = if estimator == EstimatorKind::OneStep {
            Some(OneStepFrames::extract(d, weights)?)
        } else {
            None
        };

        Ok(Frames {
            n,
            n_rct: d.n_rct,
            stratum_records,
            stratum_eps,
            pi: weights.pi.clone(),
            g_design,
            g_y,
            g_w,
            g_records,
            g_case_rows,
            g_names: g_column_names(d),
            rct_records,
            rct_x,
            rct_arm0_rows,
            outer_x: [outer_x.remove(0), outer_x.remove(0)],
            outer_gx: [outer_gx.remove(0), outer_gx.remove(0)],
            outer_w: [outer_w.remove(0), outer_w.remove(0)],
            outer_pos: [outer_pos.remove(0), outer_pos.remove(0)],
            x_names: x_column_names(d),
            onestep,
        })
    }
}

impl OneStepFrames {
    fn extract(d: &HarmonizedDataset, weights: &DesignWeights) -> Result<Self, EstimationError> {
        let eps_records: Vec<u32> = (0..d.records.len() as u32)
            .filter(|&i| d.records[i as usize].eps_s)
            .collect();
        let eps_gx = g_design_rows(d, &eps_records);
        let eps_xs = xs_design_rows(d, &eps_records);
        let eps_x = x_design_rows(d, &eps_records);
        let mut eps_w = Vec::with_capacity(eps_records.len());
        let mut eps_z = Vec::with_capacity(eps_records.len());
        let mut eps_a = Vec::with_capacity(eps_records.len());
        let mut eps_y = Vec::with_capacity(eps_records.len());
        for &i in &eps_records {
            let r = &d.records[i as usize];
            eps_w.push(weights.weight[i as usize]);
            eps_z.push(r.z);
            eps_a.push(r.a);
            eps_y.push(r.y.map(f64::from).unwrap_or(0.0));
        }
        let p = d.covariate_names.len();
        let mut proj_design = DMatrix::zeros(d.records.len(), 1 + p + 3);
        for (i, r) in d.records.iter().enumerate() {
            proj_design[(i, 0)] = 1.0;
            for (k, &v) in r.x.iter().enumerate() {
                proj_design[(i, 1 + k)] = v;
            }
            proj_design[(i, 1 + p)] = r.z as f64;
            proj_design[(i, 2 + p)] = r.a as f64;
            proj_design[(i, 3 + p)] = r.y.map(f64::from).unwrap_or(0.0);
        }
        let mut proj_names = x_column_names(d);
        proj_names.extend(["z".to_string(), "a".to_string(), "y".to_string()]);
        Ok(OneStepFrames {
            eps_records,
            eps_gx,
            eps_xs,
            eps_x,
            eps_w,
            eps_z,
            eps_a,
            eps_y,
            xs_names: xs_column_names(d),
            proj_design,
            proj_names,
        })
    }
}
