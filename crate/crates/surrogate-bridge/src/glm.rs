//! Weighted generalized-linear-model core.
//!
//! Two solvers back every regression in the crate:
//!
//! - [`fit_weighted_logistic`]: IPS-weighted logistic regression via
//!   iteratively reweighted least squares (Newton scoring) with step-halving
//!   when the weighted deviance increases. The fit solves the weighted score
//!   equations `Σ wᵢ xᵢ (yᵢ − expit(xᵢᵀβ)) = 0` to a gradient-norm tolerance.
//! - [`fit_weighted_linear`]: weighted least squares via column-pivoted QR on
//!   the row-scaled design, minimizing `Σ wᵢ (yᵢ − xᵢᵀγ)²`.
//!
//! Both detect rank deficiency with a relative pivot threshold and report
//! quasi-complete separation as an error rather than clamping, so callers
//! (e.g. the bootstrap) can decide how to handle degenerate resamples.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Maximum IRLS iterations before reporting a non-converged fit.
pub const MAX_ITERATIONS: usize = 100;
/// Gradient-norm (L2) tolerance on the weighted score equations.
pub const GRADIENT_TOLERANCE: f64 = 1e-8;
/// Relative pivot threshold for rank detection in QR factorizations.
pub const RANK_TOLERANCE: f64 = 1e-10;
/// Coefficient norm beyond which a non-vanishing gradient is treated as
/// quasi-complete separation.
const SEPARATION_NORM: f64 = 1e3;
/// |linear predictor| beyond which a fitted row is numerically saturated;
/// a "converged" fit with saturated rows is separation, not an MLE.
const LP_SATURATION: f64 = 30.0;

#[derive(Debug, Error)]
pub enum GlmError {
    #[error("design has {rows} rows but response has {response} and weights {weights}")]
    DimensionMismatch {
        rows: usize,
        response: usize,
        weights: usize,
    },
    #[error("design width {design} does not match coefficient length {coefficients}")]
    PredictShapeMismatch { design: usize, coefficients: usize },
    #[error("negative weight {weight} at row {row}")]
    NegativeWeight { row: usize, weight: f64 },
    #[error("no positive-weight rows")]
    EmptyFit,
    #[error("response must be 0/1 for logistic regression (row {row} has {value})")]
    NonBinaryResponse { row: usize, value: f64 },
    #[error("positive-weight rows contain only one response class")]
    DegenerateResponse,
    #[error("design is rank deficient on positive-weight rows (rank {rank} < {cols})")]
    RankDeficient { rank: usize, cols: usize },
    #[error("weighted information matrix is singular at iteration {iteration}")]
    SingularInformation { iteration: usize },
    #[error(
        "quasi-complete separation: coefficient norm {norm:.3e} with gradient norm {gradient:.3e}"
    )]
    Separation { norm: f64, gradient: f64 },
}

/// Link used by [`predict`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Logit,
    Identity,
}

/// A fitted weighted regression.
#[derive(Debug, Clone)]
pub struct FitResult {
    /// Coefficients, intercept first when the design has a leading 1 column.
    pub coefficients: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// L2 norm of the weighted score (logistic) or of the weighted residual
    /// cross-products with the design columns (linear).
    pub final_gradient_norm: f64,
    pub design_column_names: Vec<String>,
}

impl FitResult {
    /// Linear predictor `xᵀβ` for one row given as a slice.
    pub fn linear_predictor(&self, row: &[f64]) -> f64 {
        debug_assert_eq!(row.len(), self.coefficients.len());
        row.iter()
            .zip(self.coefficients.iter())
            .map(|(x, b)| x * b)
            .sum()
    }
}

/// Numerically stable `expit(x) = 1/(1+e^{-x})`.
#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow, for the Bernoulli log-likelihood.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn check_shapes(
    design: &DMatrix<f64>,
    response: &DVector<f64>,
    weights: &[f64],
) -> Result<(), GlmError> {
    if design.nrows() != response.len() || design.nrows() != weights.len() {
        return Err(GlmError::DimensionMismatch {
            rows: design.nrows(),
            response: response.len(),
            weights: weights.len(),
        });
    }
    for (row, &w) in weights.iter().enumerate() {
        if w < 0.0 || !w.is_finite() {
            return Err(GlmError::NegativeWeight { row, weight: w });
        }
    }
    if weights.iter().all(|&w| w == 0.0) || design.nrows() == 0 {
        return Err(GlmError::EmptyFit);
    }
    Ok(())
}

/// Rank check on the weight-scaled design via column-pivoted QR with a
/// relative pivot threshold; degenerate designs error loudly instead of
/// returning noise.
fn check_rank(design: &DMatrix<f64>, weights: &[f64]) -> Result<(), GlmError> {
    let p = design.ncols();
    let mut scaled = design.clone();
    for i in 0..design.nrows() {
        let sw = weights[i].sqrt();
        for j in 0..p {
            scaled[(i, j)] *= sw;
        }
    }
    let qr = scaled.col_piv_qr();
    let r = qr.r();
    let lead = r[(0, 0)].abs();
    if lead == 0.0 {
        return Err(GlmError::RankDeficient { rank: 0, cols: p });
    }
    let mut rank = 0;
    for k in 0..p.min(r.nrows()) {
        if r[(k, k)].abs() > RANK_TOLERANCE * lead {
            rank += 1;
        }
    }
    if rank < p {
        return Err(GlmError::RankDeficient { rank, cols: p });
    }
    Ok(())
}

/// Weighted score `Σ wᵢ xᵢ (yᵢ − pᵢ)` and its L2 norm, with `p = expit(Xβ)`.
fn logistic_score(
    design: &DMatrix<f64>,
    response: &DVector<f64>,
    weights: &[f64],
    beta: &DVector<f64>,
    probs: &mut [f64],
) -> DVector<f64> {
    let (n, p) = design.shape();
    for i in 0..n {
        let mut lp = 0.0;
        for j in 0..p {
            lp += design[(i, j)] * beta[j];
        }
        probs[i] = expit(lp);
    }
    let mut grad = DVector::zeros(p);
    // Column-wise accumulation is cache-friendly for the column-major design.
    for j in 0..p {
        let col = design.column(j);
        let mut acc = 0.0;
        for i in 0..n {
            acc += weights[i] * col[i] * (response[i] - probs[i]);
        }
        grad[j] = acc;
    }
    grad
}

/// Largest |xᵀβ| over positive-weight rows; saturation here means the fit
/// perfectly classifies some rows in floating point, i.e. separation.
fn max_abs_lp(design: &DMatrix<f64>, weights: &[f64], beta: &DVector<f64>) -> f64 {
    let (n, p) = design.shape();
    let mut worst = 0.0f64;
    for i in 0..n {
        if weights[i] == 0.0 {
            continue;
        }
        let mut lp = 0.0;
        for j in 0..p {
            lp += design[(i, j)] * beta[j];
        }
        worst = worst.max(lp.abs());
    }
    worst
}

fn weighted_deviance(response: &DVector<f64>, weights: &[f64], lp: &[f64]) -> f64 {
    let mut dev = 0.0;
    for i in 0..response.len() {
        if weights[i] == 0.0 {
            continue;
        }
        // y·lp − log(1 + e^lp) is the Bernoulli log-likelihood term.
        dev -= 2.0 * weights[i] * (response[i] * lp[i] - softplus(lp[i]));
    }
    dev
}

/// IPS-weighted logistic regression of a binary response.
///
/// Requires both response classes among positive-weight rows and a full-rank
/// design there. Returns `converged = false` (never a silently wrong fit)
/// when the score has not vanished after [`MAX_ITERATIONS`].
pub fn fit_weighted_logistic(
    design: &DMatrix<f64>,
    response: &DVector<f64>,
    weights: &[f64],
    column_names: Vec<String>,
) -> Result<FitResult, GlmError> {
    check_shapes(design, response, weights)?;
    let (n, p) = design.shape();
    let mut saw = [false, false];
    for i in 0..n {
        let y = response[i];
        if y != 0.0 && y != 1.0 {
            return Err(GlmError::NonBinaryResponse { row: i, value: y });
        }
        if weights[i] > 0.0 {
            saw[y as usize] = true;
        }
    }
    if !(saw[0] && saw[1]) {
        return Err(GlmError::DegenerateResponse);
    }
    check_rank(design, weights)?;

    // Start at the intercept-only weighted MLE when the leading column is
    // constant 1; rare-event intercepts near -6 converge far faster this way.
    let mut beta = DVector::zeros(p);
    if (0..n).all(|i| design[(i, 0)] == 1.0) {
        let wsum: f64 = weights.iter().sum();
        let ybar: f64 = (0..n).map(|i| weights[i] * response[i]).sum::<f64>() / wsum;
        let ybar = ybar.clamp(1e-10, 1.0 - 1e-10);
        beta[0] = (ybar / (1.0 - ybar)).ln();
    }

    let mut probs = vec![0.0; n];
    let mut lp = vec![0.0; n];
    let mut grad = logistic_score(design, response, weights, &beta, &mut probs);
    for i in 0..n {
        lp[i] = {
            let mut acc = 0.0;
            for j in 0..p {
                acc += design[(i, j)] * beta[j];
            }
            acc
        };
    }
    let mut dev = weighted_deviance(response, weights, &lp);

    for iteration in 1..=MAX_ITERATIONS {
        let grad_norm = grad.norm();
        if grad_norm <= GRADIENT_TOLERANCE {
            return Ok(FitResult {
                coefficients: beta,
                converged: true,
                iterations: iteration - 1,
                final_gradient_norm: grad_norm,
                design_column_names: column_names,
            });
        }
        if beta.norm() > SEPARATION_NORM {
            return Err(GlmError::Separation {
                norm: beta.norm(),
                gradient: grad_norm,
            });
        }

        // Expected information Σ wᵢ pᵢ(1−pᵢ) xᵢxᵢᵀ, built column-pair-wise.
        let mut info = DMatrix::zeros(p, p);
        for j in 0..p {
            let cj = design.column(j);
            for k in j..p {
                let ck = design.column(k);
                let mut acc = 0.0;
                for i in 0..n {
                    acc += weights[i] * probs[i] * (1.0 - probs[i]) * cj[i] * ck[i];
                }
                info[(j, k)] = acc;
                info[(k, j)] = acc;
            }
        }
        let chol = info
            .cholesky()
            .ok_or(GlmError::SingularInformation { iteration })?;
        let delta = chol.solve(&grad);

        // Step-halving: shrink the Newton step until the weighted deviance
        // stops increasing (up to 30 halvings).
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let candidate = &beta + &delta * step;
            for i in 0..n {
                let mut acc = 0.0;
                for j in 0..p {
                    acc += design[(i, j)] * candidate[j];
                }
                lp[i] = acc;
            }
            let cand_dev = weighted_deviance(response, weights, &lp);
            if cand_dev <= dev + 1e-12 * (1.0 + dev.abs()) {
                beta = candidate;
                dev = cand_dev;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No descent direction left at this scale; report as-is.
            let grad_norm = grad.norm();
            return Ok(FitResult {
                coefficients: beta,
                converged: grad_norm <= GRADIENT_TOLERANCE,
                iterations: iteration,
                final_gradient_norm: grad_norm,
                design_column_names: column_names,
            });
        }
        grad = logistic_score(design, response, weights, &beta, &mut probs);
    }

    let grad_norm = grad.norm();
    if beta.norm() > SEPARATION_NORM && grad_norm > GRADIENT_TOLERANCE {
        return Err(GlmError::Separation {
            norm: beta.norm(),
            gradient: grad_norm,
        });
    }
    Ok(FitResult {
        coefficients: beta,
        converged: grad_norm <= GRADIENT_TOLERANCE,
        iterations: MAX_ITERATIONS,
        final_gradient_norm: grad_norm,
        design_column_names: column_names,
    })
}

/// Weighted least squares: coefficients minimizing `Σ wᵢ (yᵢ − xᵢᵀγ)²`,
/// solved by column-pivoted QR on the `√w`-scaled system.
pub fn fit_weighted_linear(
    design: &DMatrix<f64>,
    response: &DVector<f64>,
    weights: &[f64],
    column_names: Vec<String>,
) -> Result<FitResult, GlmError> {
    check_shapes(design, response, weights)?;
    check_rank(design, weights)?;
    let (n, p) = design.shape();
    let mut scaled = design.clone();
    let mut scaled_y = response.clone();
    for i in 0..n {
        let sw = weights[i].sqrt();
        for j in 0..p {
            scaled[(i, j)] *= sw;
        }
        scaled_y[i] *= sw;
    }
    // Thin-QR least squares: γ = R⁻¹ (Qᵀ √W y)₍₁..p₎.
    let qr = scaled.qr();
    qr.q_tr_mul(&mut scaled_y);
    let top = scaled_y.rows(0, p).into_owned();
    let r = qr.r();
    let gamma = r
        .view((0, 0), (p, p))
        .solve_upper_triangular(&top)
        .ok_or(GlmError::RankDeficient { rank: 0, cols: p })?;

    // Normal-equation residual ‖Xᵀ W (y − Xγ)‖ as the reported score norm.
    let mut score = DVector::zeros(p);
    for j in 0..p {
        let col = design.column(j);
        let mut acc = 0.0;
        for i in 0..n {
            let mut fitted = 0.0;
            for k in 0..p {
                fitted += design[(i, k)] * gamma[k];
            }
            acc += weights[i] * col[i] * (response[i] - fitted);
        }
        score[j] = acc;
    }

    Ok(FitResult {
        coefficients: gamma,
        converged: true,
        iterations: 1,
        final_gradient_norm: score.norm(),
        design_column_names: column_names,
    })
}

/// Evaluate a fit on new rows: `Xβ` under [`Link::Identity`], `expit(Xβ)`
/// under [`Link::Logit`].
pub fn predict(fit: &FitResult, design: &DMatrix<f64>, link: Link) -> Result<DVector<f64>, GlmError> {
    if design.ncols() != fit.coefficients.len() {
        return Err(GlmError::PredictShapeMismatch {
            design: design.ncols(),
            coefficients: fit.coefficients.len(),
        });
    }
    let mut out = design * &fit.coefficients;
    if link == Link::Logit {
        out.apply(|v| *v = expit(*v));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ones(n: usize) -> Vec<f64> {
        vec![1.0; n]
    }

    #[test]
    fn intercept_only_balanced_is_zero() {
        let design = DMatrix::from_element(4, 1, 1.0);
        let y = DVector::from_vec(vec![0.0, 1.0, 0.0, 1.0]);
        let fit = fit_weighted_logistic(&design, &y, &ones(4), vec!["(intercept)".into()]).unwrap();
        assert!(fit.converged);
        assert_abs_diff_eq!(fit.coefficients[0], 0.0, epsilon = 1e-10);
    }

    #[test]
    fn intercept_only_weighted_matches_closed_form() {
        // Weighted MLE of the intercept is log(w₁/w₀).
        let design = DMatrix::from_element(2, 1, 1.0);
        let y = DVector::from_vec(vec![0.0, 1.0]);
        let fit =
            fit_weighted_logistic(&design, &y, &[1.0, 3.0], vec!["(intercept)".into()]).unwrap();
        assert_abs_diff_eq!(fit.coefficients[0], 3.0f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn logistic_weight_scale_invariance() {
        let design = DMatrix::from_row_slice(
            6,
            2,
            &[
                1.0, -1.2, 1.0, 0.3, 1.0, 1.1, 1.0, -0.4, 1.0, 0.8, 1.0, -2.0,
            ],
        );
        let y = DVector::from_vec(vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0]);
        let w1 = [1.0, 2.0, 0.5, 1.5, 1.0, 3.0];
        let w2: Vec<f64> = w1.iter().map(|w| w * 17.0).collect();
        let names = || vec!["(intercept)".to_string(), "x".to_string()];
        let f1 = fit_weighted_logistic(&design, &y, &w1, names()).unwrap();
        let f2 = fit_weighted_logistic(&design, &y, &w2, names()).unwrap();
        for j in 0..2 {
            assert_abs_diff_eq!(f1.coefficients[j], f2.coefficients[j], epsilon = 1e-7);
        }
    }

    #[test]
    fn separation_is_reported() {
        // Perfectly separated response in x.
        let design = DMatrix::from_row_slice(4, 2, &[1.0, -2.0, 1.0, -1.0, 1.0, 1.0, 1.0, 2.0]);
        let y = DVector::from_vec(vec![0.0, 0.0, 1.0, 1.0]);
        let err = fit_weighted_logistic(&design, &y, &ones(4), vec!["i".into(), "x".into()])
            .unwrap_err();
        assert!(matches!(err, GlmError::Separation { .. }), "got {err}");
    }

    #[test]
    fn rank_deficient_design_errors() {
        // Second column is a multiple of the first.
        let design = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let y = DVector::from_vec(vec![0.0, 1.0, 0.0, 1.0]);
        let err = fit_weighted_logistic(&design, &y, &ones(4), vec!["a".into(), "b".into()])
            .unwrap_err();
        assert!(matches!(err, GlmError::RankDeficient { .. }), "got {err}");
    }

    #[test]
    fn single_class_errors() {
        let design = DMatrix::from_element(3, 1, 1.0);
        let y = DVector::from_vec(vec![1.0, 1.0, 1.0]);
        let err = fit_weighted_logistic(&design, &y, &ones(3), vec!["i".into()]).unwrap_err();
        assert!(matches!(err, GlmError::DegenerateResponse));
    }

    #[test]
    fn linear_exact_interpolation() {
        // response exactly 2·x with an intercept column -> (0, 2)
        let design = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        let y = DVector::from_vec(vec![0.0, 2.0, 4.0]);
        let fit = fit_weighted_linear(&design, &y, &ones(3), vec!["i".into(), "x".into()]).unwrap();
        assert_abs_diff_eq!(fit.coefficients[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.coefficients[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn linear_constant_response() {
        let design = DMatrix::from_row_slice(4, 2, &[1.0, 0.3, 1.0, -1.2, 1.0, 2.0, 1.0, 0.9]);
        let y = DVector::from_element(4, 7.5);
        let fit = fit_weighted_linear(
            &design,
            &y,
            &[0.5, 2.0, 1.0, 4.0],
            vec!["i".into(), "x".into()],
        )
        .unwrap();
        assert_abs_diff_eq!(fit.coefficients[0], 7.5, epsilon = 1e-10);
        assert_abs_diff_eq!(fit.coefficients[1], 0.0, epsilon = 1e-10);
    }

    #[test]
    fn linear_three_point_hand_solve() {
        // {(0,1),(1,2),(2,4)} equal weights -> slope 1.5, intercept 5/6.
        let design = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 4.0]);
        let fit = fit_weighted_linear(&design, &y, &ones(3), vec!["i".into(), "x".into()]).unwrap();
        assert_abs_diff_eq!(fit.coefficients[0], 5.0 / 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.coefficients[1], 1.5, epsilon = 1e-12);
    }

    #[test]
    fn linear_orthogonality_residual_small() {
        let design = DMatrix::from_row_slice(
            5,
            2,
            &[1.0, 0.1, 1.0, 1.4, 1.0, -0.7, 1.0, 2.2, 1.0, 0.5],
        );
        let y = DVector::from_vec(vec![0.3, 1.9, -0.2, 3.3, 0.8]);
        let w = [1.0, 2.0, 0.5, 1.0, 3.0];
        let fit = fit_weighted_linear(&design, &y, &w, vec!["i".into(), "x".into()]).unwrap();
        let scale: f64 = (0..2)
            .map(|j| {
                (0..5)
                    .map(|i| w[i] * design[(i, j)] * y[i])
                    .sum::<f64>()
                    .abs()
            })
            .fold(0.0, f64::max);
        assert!(fit.final_gradient_norm <= 1e-10 * scale.max(1.0));
    }

    #[test]
    fn predict_links() {
        let fit = FitResult {
            coefficients: DVector::from_vec(vec![1.0, 2.0]),
            converged: true,
            iterations: 1,
            final_gradient_norm: 0.0,
            design_column_names: vec!["i".into(), "x".into()],
        };
        let design = DMatrix::from_row_slice(1, 2, &[1.0, 3.0]);
        let identity = predict(&fit, &design, Link::Identity).unwrap();
        assert_abs_diff_eq!(identity[0], 7.0, epsilon = 1e-12);
        let zero_fit = FitResult {
            coefficients: DVector::from_vec(vec![0.0, 0.0]),
            ..fit.clone()
        };
        let logit = predict(&zero_fit, &design, Link::Logit).unwrap();
        assert_abs_diff_eq!(logit[0], 0.5, epsilon = 1e-12);
        let bad = DMatrix::from_row_slice(1, 3, &[1.0, 3.0, 1.0]);
        assert!(predict(&fit, &bad, Link::Logit).is_err());
    }

    #[test]
    fn appendix_style_rare_event_prediction() {
        // Direct evaluation of a logit fit at a rare-event linear predictor.
        let fit = FitResult {
            coefficients: DVector::from_vec(vec![-17.1, -8.2, 0.69, -0.03, 0.0]),
            converged: true,
            iterations: 0,
            final_gradient_norm: 0.0,
            design_column_names: vec![
                "(intercept)".into(),
                "s".into(),
                "x1".into(),
                "x2".into(),
                "x3".into(),
            ],
        };
        let design = DMatrix::from_row_slice(1, 5, &[1.0, -1.45, 0.0, 29.0, 0.0]);
        let p = predict(&fit, &design, Link::Logit).unwrap()[0];
        let lp = -17.1 + 8.2 * 1.45 - 0.03 * 29.0;
        assert_abs_diff_eq!(p, expit(lp), epsilon = 1e-15);
        assert!(p > 0.0015 && p < 0.0035, "rare-event risk sanity: {p}");
    }
}
