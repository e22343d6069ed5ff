//! CSV and text-table emission for estimates, simulation metrics, and
//! sensitivity sweeps.
//!
//! CSV cells use Rust's shortest round-trip float formatting, so re-parsing a
//! machine-format file reproduces every value bit-for-bit. Text tables mirror
//! the grouped per-scenario layout of the study reports at three significant
//! digits. Empty result sets are an error; no writer emits an empty file.

use std::io::Write;

use thiserror::Error;

use crate::estimators::EffectEstimate;
use crate::inference::VarianceReport;
use crate::sensitivity::{SensitivityGrid, SensitivityReport};
use crate::simulation::{ReplicateMetrics, SimulationResults};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("nothing to report: {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Output format for [`emit_metrics`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    TextTable,
}

/// Shortest round-trip float formatting; blank for missing values.
fn csv_f64(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

fn csv_opt(v: Option<f64>) -> String {
    v.map(csv_f64).unwrap_or_default()
}

/// Three-significant-digit formatting for the text tables.
fn sig3(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-4..6).contains(&exp) {
        let decimals = (2 - exp).max(0) as usize;
        format!("{v:.decimals$}")
    } else {
        format!("{v:.2e}")
    }
}

fn sig3_opt(v: Option<f64>) -> String {
    v.map(sig3).unwrap_or_else(|| "-".to_string())
}

/// Effect estimates with their standard errors and VE interval, one row per
/// quantity (`theta0`, `theta1`, `ve`).
pub fn emit_effect_estimates<W: Write>(
    out: &mut W,
    estimate: &EffectEstimate,
    reports: &[VarianceReport],
    ve_ci: Option<(f64, f64)>,
) -> Result<(), ReportError> {
    let mut header = vec![
        "parameter".to_string(),
        "estimate".to_string(),
    ];
    for r in reports {
        header.push(format!("se_{}", r.method));
    }
    header.push("ci_lower".into());
    header.push("ci_upper".into());
    writeln!(out, "{}", header.join(","))?;
    let rows = [
        ("theta0", estimate.theta0, 0usize),
        ("theta1", estimate.theta1, 1),
        ("ve", estimate.ve, 2),
    ];
    for (name, value, idx) in rows {
        let mut cells = vec![name.to_string(), csv_f64(value)];
        for r in reports {
            let se = match idx {
                0 => r.se_theta0,
                1 => r.se_theta1,
                _ => r.se_log_one_minus_ve,
            };
            cells.push(csv_f64(se));
        }
        if idx == 2 {
            if let Some((lo, hi)) = ve_ci {
                cells.push(csv_f64(lo));
                cells.push(csv_f64(hi));
            } else {
                cells.extend([String::new(), String::new()]);
            }
        } else {
            cells.extend([String::new(), String::new()]);
        }
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Raw per-replicate rows of one scenario.
pub fn emit_raw_replicates<W: Write>(
    out: &mut W,
    results: &SimulationResults,
) -> Result<(), ReportError> {
    if results.rows.is_empty() {
        return Err(ReportError::Empty("raw replicate rows"));
    }
    writeln!(
        out,
        "scenario,estimator,replicate,theta0,theta1,log_one_minus_ve,ve,\
         se0_sw,se1_sw,selog_sw,se0_eif,se1_eif,selog_eif,se0_bs,se1_bs,selog_bs,\
         boot_discarded,ve_ci_lower,ve_ci_upper,success"
    )?;
    for r in &results.rows {
        let se = |block: Option<[f64; 3]>, i: usize| csv_opt(block.map(|b| b[i]));
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            results.scenario,
            results.estimator,
            r.replicate,
            csv_f64(r.theta0),
            csv_f64(r.theta1),
            csv_f64(r.log_one_minus_ve),
            csv_f64(r.ve),
            se(r.se_sandwich, 0),
            se(r.se_sandwich, 1),
            se(r.se_sandwich, 2),
            se(r.se_eif, 0),
            se(r.se_eif, 1),
            se(r.se_eif, 2),
            se(r.se_bootstrap, 0),
            se(r.se_bootstrap, 1),
            se(r.se_bootstrap, 2),
            r.bootstrap_discarded,
            csv_opt(r.ve_ci.map(|c| c.0)),
            csv_opt(r.ve_ci.map(|c| c.1)),
            r.success.map(|s| u8::from(s).to_string()).unwrap_or_default(),
        )?;
    }
    Ok(())
}

/// Scenario aggregates in the study-table column layout.
pub fn emit_metrics<W: Write>(
    out: &mut W,
    metrics: &[ReplicateMetrics],
    format: ReportFormat,
) -> Result<(), ReportError> {
    if metrics.is_empty() || metrics.iter().all(|m| m.parameters.is_empty()) {
        return Err(ReportError::Empty("scenario metrics"));
    }
    match format {
        ReportFormat::Csv => {
            writeln!(
                out,
                "scenario,estimator,parameter,truth,bias,se_bs,se_sw,se_eif,sd,cov,sp,\
                 median_estimate,median_ci_lower,median_ci_upper,replicates,failures"
            )?;
            for m in metrics {
                for p in &m.parameters {
                    writeln!(
                        out,
                        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                        m.scenario,
                        m.estimator,
                        p.parameter,
                        csv_f64(p.truth),
                        csv_f64(p.bias),
                        csv_opt(p.se_bootstrap),
                        csv_opt(p.se_sandwich),
                        csv_opt(p.se_eif),
                        csv_f64(p.sd),
                        csv_opt(p.coverage),
                        csv_opt(p.success_probability),
                        csv_f64(p.median_estimate),
                        csv_opt(p.median_ci_lower),
                        csv_opt(p.median_ci_upper),
                        m.n_replicates,
                        m.n_failures,
                    )?;
                }
            }
        }
        ReportFormat::TextTable => {
            for m in metrics {
                writeln!(
                    out,
                    "== {} ({}, {} replicates{}) ==",
                    m.scenario,
                    m.estimator,
                    m.n_replicates,
                    if m.n_failures > 0 {
                        format!(", {} failed", m.n_failures)
                    } else {
                        String::new()
                    }
                )?;
                writeln!(
                    out,
                    "{:<10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>6} {:>6}",
                    "parameter", "truth", "bias", "se_bs", "se_sw", "sd", "cov", "sp"
                )?;
                for p in &m.parameters {
                    let se_analytic = p.se_sandwich.or(p.se_eif);
                    writeln!(
                        out,
                        "{:<10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>6} {:>6}",
                        p.parameter,
                        sig3(p.truth),
                        sig3(p.bias),
                        sig3_opt(p.se_bootstrap),
                        sig3_opt(se_analytic),
                        sig3(p.sd),
                        sig3_opt(p.coverage),
                        sig3_opt(p.success_probability),
                    )?;
                }
                writeln!(out)?;
            }
        }
    }
    Ok(())
}

/// Per-scenario medians of estimates and CI bounds (figure-style data).
pub fn emit_plot_data<W: Write>(
    out: &mut W,
    metrics: &[ReplicateMetrics],
) -> Result<(), ReportError> {
    if metrics.is_empty() {
        return Err(ReportError::Empty("plot data"));
    }
    writeln!(
        out,
        "scenario,estimator,parameter,truth,median_estimate,median_ci_lower,median_ci_upper,cov,sp"
    )?;
    for m in metrics {
        for p in &m.parameters {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                m.scenario,
                m.estimator,
                p.parameter,
                csv_f64(p.truth),
                csv_f64(p.median_estimate),
                csv_opt(p.median_ci_lower),
                csv_opt(p.median_ci_upper),
                csv_opt(p.coverage),
                csv_opt(p.success_probability),
            )?;
        }
    }
    Ok(())
}

/// Evaluated sensitivity grid, one row per bias point.
pub fn emit_sensitivity_grid<W: Write>(
    out: &mut W,
    grid: &SensitivityGrid,
) -> Result<(), ReportError> {
    if grid.points.is_empty() {
        return Err(ReportError::Empty("sensitivity grid"));
    }
    writeln!(
        out,
        "u_uc,u_ct,theta0,theta1,ve,se_log_one_minus_ve,ve_ci_lower,ve_ci_upper"
    )?;
    for p in &grid.points {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            csv_f64(p.bias.u_uc),
            csv_f64(p.bias.u_ct),
            csv_f64(p.estimate.theta0),
            csv_f64(p.estimate.theta1),
            csv_f64(p.estimate.ve),
            csv_f64(p.variance.se_log_one_minus_ve),
            csv_f64(p.ve_lower),
            csv_f64(p.ve_upper),
        )?;
    }
    Ok(())
}

/// Ignorance interval, EUI, and success verdict of one sweep.
pub fn emit_sensitivity_report<W: Write>(
    out: &mut W,
    report: &SensitivityReport,
) -> Result<(), ReportError> {
    writeln!(
        out,
        "ignorance_lower,ignorance_upper,eui_lower,eui_upper,threshold,success"
    )?;
    writeln!(
        out,
        "{},{},{},{},{},{}",
        csv_f64(report.ignorance_interval.0),
        csv_f64(report.ignorance_interval.1),
        csv_f64(report.eui.0),
        csv_f64(report.eui.1),
        csv_f64(report.threshold),
        u8::from(report.success),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig3_formats() {
        assert_eq!(sig3(0.0), "0");
        assert_eq!(sig3(0.95), "0.950");
        assert_eq!(sig3(-0.00322), "-0.00322");
        assert_eq!(sig3(123.4), "123");
        assert_eq!(sig3(0.000000912), "9.12e-7");
    }

    #[test]
    fn csv_round_trip_formatting() {
        let v = 0.1 + 0.2;
        let s = csv_f64(v);
        let back: f64 = s.parse().unwrap();
        assert_eq!(back.to_bits(), v.to_bits());
    }

    #[test]
    fn empty_metrics_error() {
        let mut buf = Vec::new();
        assert!(matches!(
            emit_metrics(&mut buf, &[], ReportFormat::Csv),
            Err(ReportError::Empty(_))
        ));
        assert!(buf.is_empty());
    }
}
