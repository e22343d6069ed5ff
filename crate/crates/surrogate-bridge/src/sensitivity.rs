//! Bias-function specification and conservative reporting.
//!
//! A sensitivity analysis fixes a grid of constant bias pairs
//! `(u_UC, u_CT)`, reruns the estimator and its confidence interval at every
//! point, and reports the range of point estimates (ignorance interval)
//! together with the envelope of the per-point 95% confidence intervals (the
//! 95% estimated uncertainty interval, EUI). The provisional-approval success
//! criterion asks the EUI lower bound to clear a threshold (0.3 in the
//! simulation studies).
//!
//! [`pte_to_bias`] converts a target product profile into a `u_CT` magnitude:
//! with additive effect `TE^ATE = −placebo_risk · TE` and a proportion-of-
//! treatment-effect-explained PTE, `|u_CT| = |TE^ATE · (1 − PTE)|`. The
//! conservative sweep uses `+|u_CT|`; a full sweep uses both signs.

use thiserror::Error;

use crate::estimators::{BiasSpecification, EffectEstimate, EstimationError, TransportPipeline};
use crate::inference::{
    eif_variance_report, sandwich_variance, wald_interval_ve, InferenceError, PiBlockMode,
    VarianceReport,
};

#[derive(Debug, Error)]
pub enum SensitivityError {
    #[error("empty bias grid")]
    EmptyGrid,
    #[error("argument {name} = {value} outside {range}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("grid point (u_uc={u_uc}, u_ct={u_ct}) failed: {source}")]
    GridPoint {
        u_uc: f64,
        u_ct: f64,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

fn grid_err(
    bias: &BiasSpecification,
) -> impl FnOnce(Box<dyn std::error::Error + Send + Sync>) -> SensitivityError + '_ {
    move |source| SensitivityError::GridPoint {
        u_uc: bias.u_uc,
        u_ct: bias.u_ct,
        source,
    }
}

/// `u_CT` magnitude implied by a target profile: treatment efficacy target,
/// placebo-arm risk, and the proportion of the treatment effect explained by
/// the surrogate.
pub fn pte_to_bias(
    te_target: f64,
    placebo_risk: f64,
    pte: f64,
) -> Result<f64, SensitivityError> {
    if !(te_target > 0.0 && te_target < 1.0) {
        return Err(SensitivityError::OutOfRange {
            name: "te_target",
            value: te_target,
            range: "(0,1)",
        });
    }
    if !(placebo_risk > 0.0 && placebo_risk < 1.0) {
        return Err(SensitivityError::OutOfRange {
            name: "placebo_risk",
            value: placebo_risk,
            range: "(0,1)",
        });
    }
    if !(0.0..=1.0).contains(&pte) {
        return Err(SensitivityError::OutOfRange {
            name: "pte",
            value: pte,
            range: "[0,1]",
        });
    }
    let te_ate = -placebo_risk * te_target;
    Ok((te_ate * (1.0 - pte)).abs())
}

/// Evaluation of one bias point.
#[derive(Debug, Clone)]
pub struct GridPoint {
    pub bias: BiasSpecification,
    pub estimate: EffectEstimate,
    pub variance: VarianceReport,
    pub ve_lower: f64,
    pub ve_upper: f64,
}

/// All evaluated bias points of one sweep.
#[derive(Debug, Clone)]
pub struct SensitivityGrid {
    pub points: Vec<GridPoint>,
    pub level: f64,
}

/// Ignorance interval, EUI, and the success verdict of one sweep.
#[derive(Debug, Clone)]
pub struct SensitivityReport {
    /// (min, max) of the VE point estimates over the grid.
    pub ignorance_interval: (f64, f64),
    /// (min of lower bounds, max of upper bounds) over the per-point CIs.
    pub eui: (f64, f64),
    pub success: bool,
    pub threshold: f64,
}

/// Variance method used inside a sweep.
#[derive(Debug, Clone, Copy)]
pub enum SweepVariance {
    /// Stacked-estimating-equation sandwich (plug-in estimator).
    Sandwich,
    /// Stratified bootstrap with the given replicate count and seed.
    Bootstrap { b: usize, seed: u64 },
    /// Empirical variance of the projected EIF (one-step estimator).
    Eif,
}

/// Evaluate the full estimator + variance pipeline at every grid point and
/// assemble the conservative report. Any failing point aborts the sweep with
/// that point identified.
pub fn sweep_grid(
    pipeline: &TransportPipeline,
    grid: &[BiasSpecification],
    level: f64,
    variance: SweepVariance,
    threshold: f64,
) -> Result<(SensitivityGrid, SensitivityReport), SensitivityError> {
    if grid.is_empty() {
        return Err(SensitivityError::EmptyGrid);
    }
    let mut points = Vec::with_capacity(grid.len());
    for bias in grid {
        let fit = pipeline
            .fit_with_bias(bias)
            .map_err(|e| grid_err(bias)(Box::new(e)))?;
        let report = match variance {
            SweepVariance::Sandwich => sandwich_variance(pipeline, &fit, PiBlockMode::Known)
                .map_err(|e| grid_err(bias)(Box::new(e)))?,
            SweepVariance::Bootstrap { b, seed } => {
                // The bootstrap reruns the pipeline at this grid point's bias.
                let mut counts: Vec<u32> = Vec::new();
                crate::inference::stratified_bootstrap(
                    |rng| pipeline.bootstrap_replicate_with_bias(bias, rng, &mut counts),
                    b,
                    seed,
                )
                .map_err(|e| grid_err(bias)(Box::new(e)))?
            }
            SweepVariance::Eif => {
                let projected = fit
                    .projected_eif
                    .as_ref()
                    .ok_or_else(|| grid_err(bias)(Box::new(EstimationError::OneStepUnavailable)))?;
                let effect = fit.effect();
                eif_variance_report(&projected[0], &projected[1], effect.theta0, effect.theta1)
                    .map_err(|e| grid_err(bias)(Box::new(e)))?
            }
        };
        let estimate = fit.effect().clone();
        let (ve_lower, ve_upper) =
            wald_interval_ve(&estimate, report.se_log_one_minus_ve, level)
                .map_err(|e: InferenceError| grid_err(bias)(Box::new(e)))?;
        points.push(GridPoint {
            bias: *bias,
            estimate,
            variance: report,
            ve_lower,
            ve_upper,
        });
    }
    let grid = SensitivityGrid { points, level };
    let report = summarize(&grid, threshold)?;
    Ok((grid, report))
}

/// Min/max aggregation of a fully evaluated grid.
pub fn summarize(
    grid: &SensitivityGrid,
    threshold: f64,
) -> Result<SensitivityReport, SensitivityError> {
    if grid.points.is_empty() {
        return Err(SensitivityError::EmptyGrid);
    }
    let mut ig = (f64::INFINITY, f64::NEG_INFINITY);
    let mut eui = (f64::INFINITY, f64::NEG_INFINITY);
    for p in &grid.points {
        ig.0 = ig.0.min(p.estimate.ve);
        ig.1 = ig.1.max(p.estimate.ve);
        eui.0 = eui.0.min(p.ve_lower);
        eui.1 = eui.1.max(p.ve_upper);
    }
    let report = SensitivityReport {
        ignorance_interval: ig,
        eui,
        success: eui.0 >= threshold,
        threshold,
    };
    debug_assert!(report.eui.0 <= report.ignorance_interval.0 + 1e-12);
    debug_assert!(report.eui.1 >= report.ignorance_interval.1 - 1e-12);
    Ok(report)
}

/// Provisional-approval rule: the 95% EUI for VE lies entirely at or above
/// the threshold.
pub fn evaluate_success(report: &SensitivityReport, threshold: f64) -> bool {
    report.eui.0 >= threshold
}

/// Overall treatment efficacy when efficacy is only assessed in the
/// colonized subgroup: `1 − (1 − TE_colonized)(1 − TE_against_colonization)`.
pub fn colonization_bound(te_colonized: f64, te_against_colonization: f64) -> f64 {
    1.0 - (1.0 - te_colonized) * (1.0 - te_against_colonization)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn pte_recipe_matches_worked_examples() {
        // TE 0.7 and placebo risk 0.005: PTE 0.5 → 0.00175, PTE 1 → 0.
        assert_abs_diff_eq!(pte_to_bias(0.7, 0.005, 0.5).unwrap(), 0.00175, epsilon = 1e-12);
        assert_abs_diff_eq!(pte_to_bias(0.7, 0.005, 1.0).unwrap(), 0.0, epsilon = 1e-15);
        let near_published = pte_to_bias(0.7, 0.005, 0.67).unwrap();
        assert_abs_diff_eq!(near_published, 0.001155, epsilon = 1e-9);
    }

    #[test]
    fn pte_rejects_out_of_range() {
        assert!(pte_to_bias(0.0, 0.005, 0.5).is_err());
        assert!(pte_to_bias(0.7, 1.5, 0.5).is_err());
        assert!(pte_to_bias(0.7, 0.005, -0.1).is_err());
    }

    #[test]
    fn colonization_bound_examples() {
        assert_abs_diff_eq!(colonization_bound(0.5, 0.0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(colonization_bound(0.7, 0.1), 0.73, epsilon = 1e-12);
        assert_abs_diff_eq!(colonization_bound(0.0, 0.0), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn colonization_bound_monotone() {
        let base = colonization_bound(0.4, 0.2);
        assert!(colonization_bound(0.5, 0.2) > base);
        assert!(colonization_bound(0.4, 0.3) > base);
    }

    #[test]
    fn success_monotone_in_threshold() {
        let report = SensitivityReport {
            ignorance_interval: (0.4, 0.6),
            eui: (0.35, 0.9),
            success: true,
            threshold: 0.3,
        };
        assert!(evaluate_success(&report, 0.3));
        assert!(evaluate_success(&report, 0.2));
        assert!(!evaluate_success(&report, 0.36));
    }

    #[test]
    fn success_boundary_cases() {
        let mut report = SensitivityReport {
            ignorance_interval: (0.4, 0.6),
            eui: (0.35, 0.9),
            success: true,
            threshold: 0.3,
        };
        assert!(evaluate_success(&report, 0.35));
        report.eui.0 = 0.29;
        assert!(!evaluate_success(&report, 0.3));
    }
}
