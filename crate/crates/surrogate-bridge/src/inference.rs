//! Variance and interval machinery for the transport estimators.
//!
//! The plug-in estimator is an M-estimator: stacking the estimating functions
//! of every fitted parameter
//! `ν = (β, γ₀, γ₁, [α,] φ₀, φ₁)` — the `g` score, the two outer-mean scores,
//! optionally the sampling-probability model, and the two mean equations —
//! gives the sandwich `V_n = W_n⁻¹ Q_n (W_n⁻¹)ᵀ` with
//! `W_n = (1/n) Σ {−∂h_stack/∂ν}` and `Q_n` the empirical outer-product mean.
//! Standard errors for `θ̂_a` are `√(V_n[φ_a, φ_a]/n)`; the delta method with
//! gradient `(−1/θ₀, 1/θ₁)` transfers them to `log(1−VE)`.
//!
//! `W_n` uses exact derivatives for the GLM diagonal blocks and central
//! finite differences (relative step `1e-6·(1+|ν_j|)`) for cross-block terms.
//!
//! The stratified bootstrap resamples cases and controls separately in the
//! observational study and the two randomization arms separately in the
//! phase 3 study, reruns the full estimation pipeline per replicate, and uses
//! sample standard deviations over successful replicates. Replicates that
//! fail (separation, singular resample designs) are discarded and counted;
//! more than 10% discards is an error, not a warning.

use nalgebra::{DMatrix, DVector, Matrix2};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::data_model::Stratum;
use crate::estimators::{
    BootstrapDraw, EffectEstimate, EstimationError, TransportFit, TransportPipeline,
};
use crate::glm::expit;
use crate::streams::{domain, substream};

/// Finite-difference relative step for cross-block derivatives of `W_n`.
const FD_RELATIVE_STEP: f64 = 1e-6;
/// Maximum tolerated fraction of discarded bootstrap replicates.
const MAX_DISCARD_FRACTION: f64 = 0.10;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error("stacked Jacobian W_n is singular")]
    SingularW,
    #[error("non-finite entry in the stacked system at block {0}")]
    NonFinite(&'static str),
    #[error("bootstrap needs at least 2 replicates (got {0})")]
    TooFewReplicates(usize),
    #[error("unstable resampling: {discarded} of {requested} bootstrap replicates failed (>{limit:.0}%)")]
    UnstableResampling {
        discarded: usize,
        requested: usize,
        limit: f64,
    },
    #[error("confidence level {0} outside (0,1)")]
    BadLevel(f64),
    #[error("EIF variance needs at least 2 values (got {0})")]
    TooFewValues(usize),
    #[error(
        "sampling-model block requested but realized sampling fraction {realized:.6} of stratum {stratum:?} \
         differs from the design probability {design:.6}"
    )]
    PiMismatch {
        stratum: Stratum,
        realized: f64,
        design: f64,
    },
}

/// Which machinery produced a [`VarianceReport`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceMethod {
    Sandwich,
    Bootstrap,
    Eif,
}

impl std::fmt::Display for VarianceMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            VarianceMethod::Sandwich => write!(f, "sandwich"),
            VarianceMethod::Bootstrap => write!(f, "bootstrap"),
            VarianceMethod::Eif => write!(f, "eif"),
        }
    }
}

/// Standard errors for the arm risks and the log-TE contrast.
#[derive(Debug, Clone)]
pub struct VarianceReport {
    pub se_theta0: f64,
    pub se_theta1: f64,
    pub se_log_one_minus_ve: f64,
    pub cov_theta: Matrix2<f64>,
    pub method: VarianceMethod,
    /// Bootstrap replicates used (0 for analytic methods).
    pub b_reps: usize,
    pub discarded_resamples: usize,
}

impl VarianceReport {
    fn from_cov(cov: Matrix2<f64>, theta0: f64, theta1: f64, method: VarianceMethod) -> Self {
        let var_log = cov[(0, 0)] / (theta0 * theta0) + cov[(1, 1)] / (theta1 * theta1)
            - 2.0 * cov[(0, 1)] / (theta0 * theta1);
        VarianceReport {
            se_theta0: cov[(0, 0)].max(0.0).sqrt(),
            se_theta1: cov[(1, 1)].max(0.0).sqrt(),
            se_log_one_minus_ve: var_log.max(0.0).sqrt(),
            cov_theta: cov,
            method,
            b_reps: 0,
            discarded_resamples: 0,
        }
    }
}

/// Whether the sampling probabilities enter the stacked system as estimated
/// parameters (one `h_π` block per stratum) or as known design constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PiBlockMode {
    Known,
    Estimated,
}

// ---------------------------------------------------------------------------
// Stacked estimating equations.
// ---------------------------------------------------------------------------

/// Block layout of the stacked parameter vector.
#[derive(Debug, Clone)]
struct Layout {
    p_g: usize,
    p_x: usize,
    alpha: usize, // 0 or 4
}

impl Layout {
    fn beta(&self) -> std::ops::Range<usize> {
        0..self.p_g
    }
    fn gamma(&self, arm: usize) -> std::ops::Range<usize> {
        let start = self.p_g + arm * self.p_x;
        start..start + self.p_x
    }
    fn alpha_block(&self) -> std::ops::Range<usize> {
        let start = self.p_g + 2 * self.p_x;
        start..start + self.alpha
    }
    fn phi(&self, arm: usize) -> usize {
        self.p_g + 2 * self.p_x + self.alpha + arm
    }
    fn len(&self) -> usize {
        self.p_g + 2 * self.p_x + self.alpha + 2
    }
}

/// The stacked estimating-equation system at the fitted parameters, exposing
/// the averaged stacked function and the sandwich pieces.
pub struct StackedSystem<'a> {
    pipeline: &'a TransportPipeline,
    fit: &'a TransportFit,
    layout: Layout,
    nu: DVector<f64>,
    /// Sampling fraction per stratum (Estimated mode).
    alpha_hat: [f64; 4],
    /// Record counts per stratum.
    stratum_totals: [usize; 4],
}

impl<'a> StackedSystem<'a> {
    pub fn new(
        pipeline: &'a TransportPipeline,
        fit: &'a TransportFit,
        mode: PiBlockMode,
    ) -> Result<Self, InferenceError> {
        let f = &pipeline.frames;
        let p_g = fit.nuisance.g_fit.coefficients.len();
        let p_x = fit.nuisance.mu0_fit.coefficients.len();
        let layout = Layout {
            p_g,
            p_x,
            alpha: if mode == PiBlockMode::Estimated { 4 } else { 0 },
        };
        let mut stratum_totals = [0usize; 4];
        let mut alpha_hat = [1.0f64; 4];
        for s in 0..4 {
            stratum_totals[s] = f.stratum_records[s].len();
            if stratum_totals[s] > 0 {
                alpha_hat[s] = f.stratum_eps[s] as f64 / stratum_totals[s] as f64;
            }
        }
        if mode == PiBlockMode::Estimated {
            // The pipeline fits used the design π; the stacked system is only
            // at its root when the realized fractions agree with them.
            for s in 0..4 {
                if stratum_totals[s] == 0 {
                    continue;
                }
                let rec = f.stratum_records[s][0] as usize;
                let design_pi = f.pi[rec];
                if (design_pi - alpha_hat[s]).abs() > 1e-9 {
                    return Err(InferenceError::PiMismatch {
                        stratum: Stratum::ALL[s],
                        realized: alpha_hat[s],
                        design: design_pi,
                    });
                }
            }
        }
        let mut nu = DVector::zeros(layout.len());
        nu.rows_mut(0, p_g)
            .copy_from(&fit.nuisance.g_fit.coefficients);
        nu.rows_mut(p_g, p_x)
            .copy_from(&fit.nuisance.mu0_fit.coefficients);
        nu.rows_mut(p_g + p_x, p_x)
            .copy_from(&fit.nuisance.mu1_fit.coefficients);
        if layout.alpha > 0 {
            for s in 0..4 {
                nu[layout.alpha_block().start + s] = alpha_hat[s];
            }
        }
        nu[layout.phi(0)] = fit.plug_in.theta0;
        nu[layout.phi(1)] = fit.plug_in.theta1;
        Ok(StackedSystem {
            pipeline,
            fit,
            layout,
            nu,
            alpha_hat,
            stratum_totals,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.layout.len()
    }

    pub fn nu_hat(&self) -> &DVector<f64> {
        &self.nu
    }

    /// Weight of a g-block row under parameters `nu` (the α block scales the
    /// IPS weights in Estimated mode).
    fn g_row_weight(&self, row: usize, nu: &DVector<f64>) -> f64 {
        let f = &self.pipeline.frames;
        if self.layout.alpha == 0 {
            f.g_w[row]
        } else {
            let stratum = if row < f.g_case_rows {
                Stratum::ObsCase.index()
            } else {
                Stratum::ObsControl.index()
            };
            1.0 / nu[self.layout.alpha_block().start + stratum]
        }
    }

    fn outer_row_weight(&self, arm: usize, row: usize, nu: &DVector<f64>) -> f64 {
        let f = &self.pipeline.frames;
        if self.layout.alpha == 0 {
            f.outer_w[arm][row]
        } else {
            let stratum = if arm == 0 {
                Stratum::RctArm0.index()
            } else {
                Stratum::RctArm1.index()
            };
            1.0 / nu[self.layout.alpha_block().start + stratum]
        }
    }

    /// `(1/n) Σᵢ h_g(Oᵢ; ν)`.
    fn mean_h_g(&self, nu: &DVector<f64>, out: &mut DVector<f64>) {
        let f = &self.pipeline.frames;
        let p_g = self.layout.p_g;
        out.fill(0.0);
        for row in 0..f.g_design.nrows() {
            let mut lp = 0.0;
            for j in 0..p_g {
                lp += f.g_design[(row, j)] * nu[j];
            }
            let resid = self.g_row_weight(row, nu) * (f.g_y[row] - expit(lp));
            for j in 0..p_g {
                out[j] += f.g_design[(row, j)] * resid;
            }
        }
        *out /= f.n as f64;
    }

    /// `(1/n) Σᵢ h_{μ_arm}(Oᵢ; ν)`.
    fn mean_h_mu(&self, arm: usize, nu: &DVector<f64>, out: &mut DVector<f64>) {
        let f = &self.pipeline.frames;
        let p_g = self.layout.p_g;
        let p_x = self.layout.p_x;
        let gamma = self.layout.gamma(arm);
        let shift = self.fit.nuisance.bias.shift(arm as u8);
        out.fill(0.0);
        for row in 0..f.outer_x[arm].nrows() {
            let mut g_lp = 0.0;
            for j in 0..p_g {
                g_lp += f.outer_gx[arm][(row, j)] * nu[j];
            }
            let g_star = expit(g_lp) + shift;
            let mut mu = 0.0;
            for j in 0..p_x {
                mu += f.outer_x[arm][(row, j)] * nu[gamma.start + j];
            }
            let resid = self.outer_row_weight(arm, row, nu) * (g_star - mu);
            for j in 0..p_x {
                out[j] += f.outer_x[arm][(row, j)] * resid;
            }
        }
        *out /= f.n as f64;
    }

    /// `(1/n) Σᵢ h_{φ_arm}(Oᵢ; ν)` (scalar).
    fn mean_h_phi(&self, arm: usize, nu: &DVector<f64>) -> f64 {
        let f = &self.pipeline.frames;
        let p_x = self.layout.p_x;
        let gamma = self.layout.gamma(arm);
        let phi = nu[self.layout.phi(arm)];
        let mut acc = 0.0;
        for row in 0..f.rct_x.nrows() {
            let mut mu = 0.0;
            for j in 0..p_x {
                mu += f.rct_x[(row, j)] * nu[gamma.start + j];
            }
            acc += mu - phi;
        }
        acc / f.n as f64
    }

    /// Full averaged stacked estimating function `(1/n) Σᵢ h_stack(Oᵢ; ν)`.
    pub fn mean_h(&self, nu: &DVector<f64>) -> DVector<f64> {
        let f = &self.pipeline.frames;
        let mut out = DVector::zeros(self.layout.len());
        let mut block = DVector::zeros(self.layout.p_g);
        self.mean_h_g(nu, &mut block);
        out.rows_mut(0, self.layout.p_g).copy_from(&block);
        let mut block = DVector::zeros(self.layout.p_x);
        for arm in 0..2 {
            self.mean_h_mu(arm, nu, &mut block);
            out.rows_mut(self.layout.gamma(arm).start, self.layout.p_x)
                .copy_from(&block);
        }
        if self.layout.alpha > 0 {
            for s in 0..4 {
                let alpha_s = nu[self.layout.alpha_block().start + s];
                let m = f.stratum_eps[s] as f64;
                let n_s = self.stratum_totals[s] as f64;
                out[self.layout.alpha_block().start + s] =
                    (m - n_s * alpha_s) / f.n as f64;
            }
        }
        out[self.layout.phi(0)] = self.mean_h_phi(0, nu);
        out[self.layout.phi(1)] = self.mean_h_phi(1, nu);
        out
    }

    /// `W_n = (1/n) Σ {−∂h_stack/∂ν}`: analytic GLM diagonal blocks, central
    /// finite differences for cross-block terms.
    pub fn w_matrix(&self) -> Result<DMatrix<f64>, InferenceError> {
        let f = &self.pipeline.frames;
        let l = &self.layout;
        let n = f.n as f64;
        let mut w = DMatrix::zeros(l.len(), l.len());

        // (β, β): weighted logistic information.
        for row in 0..f.g_design.nrows() {
            let mut lp = 0.0;
            for j in 0..l.p_g {
                lp += f.g_design[(row, j)] * self.nu[j];
            }
            let p = expit(lp);
            let scale = self.g_row_weight(row, &self.nu) * p * (1.0 - p);
            for j in 0..l.p_g {
                let xj = f.g_design[(row, j)] * scale;
                for k in j..l.p_g {
                    w[(j, k)] += xj * f.g_design[(row, k)];
                }
            }
        }
        for j in 0..l.p_g {
            for k in 0..j {
                w[(j, k)] = w[(k, j)];
            }
        }

        // (γ_a, γ_a): weighted linear information.
        for arm in 0..2 {
            let gamma = l.gamma(arm);
            for row in 0..f.outer_x[arm].nrows() {
                let wt = self.outer_row_weight(arm, row, &self.nu);
                for j in 0..l.p_x {
                    let xj = f.outer_x[arm][(row, j)] * wt;
                    for k in j..l.p_x {
                        w[(gamma.start + j, gamma.start + k)] += xj * f.outer_x[arm][(row, k)];
                    }
                }
            }
            for j in 0..l.p_x {
                for k in 0..j {
                    w[(gamma.start + j, gamma.start + k)] = w[(gamma.start + k, gamma.start + j)];
                }
            }
        }

        // (α, α): −∂/∂α_s of I(stratum s)(ε − α_s) is I(stratum s).
        if l.alpha > 0 {
            for s in 0..4 {
                let i = l.alpha_block().start + s;
                w[(i, i)] = self.stratum_totals[s] as f64;
            }
        }

        // (φ_a, φ_a): each phase 3 record contributes 1.
        w[(l.phi(0), l.phi(0))] = f.n_rct as f64;
        w[(l.phi(1), l.phi(1))] = f.n_rct as f64;

        w /= n;

        // Cross blocks by central finite differences of the dependent block
        // means. Dependencies: h_μa ← β and α; h_g ← α; h_φa ← γ_a.
        let mut nu_p = self.nu.clone();
        let finite = |d: f64| -> Result<f64, InferenceError> {
            if d.is_finite() {
                Ok(d)
            } else {
                Err(InferenceError::NonFinite("W cross block"))
            }
        };

        // h_μ0, h_μ1 ← β
        let mut mu_plus = DVector::zeros(l.p_x);
        let mut mu_minus = DVector::zeros(l.p_x);
        for j in self.layout.beta() {
            let step = FD_RELATIVE_STEP * (1.0 + self.nu[j].abs());
            for arm in 0..2 {
                nu_p[j] = self.nu[j] + step;
                self.mean_h_mu(arm, &nu_p, &mut mu_plus);
                nu_p[j] = self.nu[j] - step;
                self.mean_h_mu(arm, &nu_p, &mut mu_minus);
                nu_p[j] = self.nu[j];
                let gamma = self.layout.gamma(arm);
                for k in 0..l.p_x {
                    let d = finite((mu_plus[k] - mu_minus[k]) / (2.0 * step))?;
                    w[(gamma.start + k, j)] = -d;
                }
            }
        }

        // h_φa ← γ_a
        for arm in 0..2 {
            for j in self.layout.gamma(arm) {
                let step = FD_RELATIVE_STEP * (1.0 + self.nu[j].abs());
                nu_p[j] = self.nu[j] + step;
                let hp = self.mean_h_phi(arm, &nu_p);
                nu_p[j] = self.nu[j] - step;
                let hm = self.mean_h_phi(arm, &nu_p);
                nu_p[j] = self.nu[j];
                let d = finite((hp - hm) / (2.0 * step))?;
                w[(self.layout.phi(arm), j)] = -d;
            }
        }

        // h_g, h_μ0, h_μ1 ← α (sampling weights enter through 1/α)
        if l.alpha > 0 {
            let mut g_plus = DVector::zeros(l.p_g);
            let mut g_minus = DVector::zeros(l.p_g);
            for j in self.layout.alpha_block() {
                let step = FD_RELATIVE_STEP * (1.0 + self.nu[j].abs());
                nu_p[j] = self.nu[j] + step;
                self.mean_h_g(&nu_p, &mut g_plus);
                nu_p[j] = self.nu[j] - step;
                self.mean_h_g(&nu_p, &mut g_minus);
                for k in 0..l.p_g {
                    let d = finite((g_plus[k] - g_minus[k]) / (2.0 * step))?;
                    w[(k, j)] = -d;
                }
                for arm in 0..2 {
                    nu_p[j] = self.nu[j] + step;
                    self.mean_h_mu(arm, &nu_p, &mut mu_plus);
                    nu_p[j] = self.nu[j] - step;
                    self.mean_h_mu(arm, &nu_p, &mut mu_minus);
                    let gamma = self.layout.gamma(arm);
                    for k in 0..l.p_x {
                        let d = finite((mu_plus[k] - mu_minus[k]) / (2.0 * step))?;
                        w[(gamma.start + k, j)] = -d;
                    }
                }
                nu_p[j] = self.nu[j];
            }
        }
        Ok(w)
    }

    /// `Q_n = (1/n) Σ h_stack h_stackᵀ` at the fitted parameters, accumulated
    /// from the sparse per-record support.
    pub fn q_matrix(&self) -> DMatrix<f64> {
        let f = &self.pipeline.frames;
        let l = &self.layout;
        let mut q = DMatrix::zeros(l.len(), l.len());
        // Sparse rank-1 update helper.
        let mut entries: Vec<(usize, f64)> = Vec::with_capacity(l.p_g.max(l.p_x + 3) + 1);
        let add = |q: &mut DMatrix<f64>, entries: &[(usize, f64)]| {
            for (a, &(i, vi)) in entries.iter().enumerate() {
                for &(j, vj) in &entries[a..] {
                    if i <= j {
                        q[(i, j)] += vi * vj;
                    } else {
                        q[(j, i)] += vj * vi;
                    }
                }
            }
        };

        // Observational S-measured rows: h_g block (+ α entry).
        for row in 0..f.g_design.nrows() {
            entries.clear();
            let mut lp = 0.0;
            for j in 0..l.p_g {
                lp += f.g_design[(row, j)] * self.nu[j];
            }
            let resid = self.g_row_weight(row, &self.nu) * (f.g_y[row] - expit(lp));
            for j in 0..l.p_g {
                entries.push((j, f.g_design[(row, j)] * resid));
            }
            if l.alpha > 0 {
                let stratum = if row < f.g_case_rows {
                    Stratum::ObsCase.index()
                } else {
                    Stratum::ObsControl.index()
                };
                entries.push((
                    l.alpha_block().start + stratum,
                    1.0 - self.alpha_hat[stratum],
                ));
            }
            add(&mut q, &entries);
        }
        // Observational unsampled rows contribute only the α residual −α_s.
        if l.alpha > 0 {
            for s in [Stratum::ObsCase.index(), Stratum::ObsControl.index()] {
                let unsampled = self.stratum_totals[s] - f.stratum_eps[s];
                let i = l.alpha_block().start + s;
                q[(i, i)] += unsampled as f64 * self.alpha_hat[s] * self.alpha_hat[s];
            }
        }

        // Phase 3 rows: h_φ0, h_φ1, the arm's h_μ when S-measured, α entry.
        let outer_row_of_pos: [std::collections::HashMap<u32, usize>; 2] = [
            f.outer_pos[0]
                .iter()
                .enumerate()
                .map(|(r, &p)| (p, r))
                .collect(),
            f.outer_pos[1]
                .iter()
                .enumerate()
                .map(|(r, &p)| (p, r))
                .collect(),
        ];
        let mut mu_cache = [0.0f64; 2];
        for pos in 0..f.rct_x.nrows() {
            entries.clear();
            let arm = usize::from(pos >= f.rct_arm0_rows);
            for a in 0..2 {
                let gamma = self.layout.gamma(a);
                let mut mu = 0.0;
                for j in 0..l.p_x {
                    mu += f.rct_x[(pos, j)] * self.nu[gamma.start + j];
                }
                mu_cache[a] = mu;
            }
            if let Some(&row) = outer_row_of_pos[arm].get(&(pos as u32)) {
                let mut g_lp = 0.0;
                for j in 0..l.p_g {
                    g_lp += f.outer_gx[arm][(row, j)] * self.nu[j];
                }
                let g_star = expit(g_lp) + self.fit.nuisance.bias.shift(arm as u8);
                let resid =
                    self.outer_row_weight(arm, row, &self.nu) * (g_star - mu_cache[arm]);
                let gamma = self.layout.gamma(arm);
                for j in 0..l.p_x {
                    entries.push((gamma.start + j, f.outer_x[arm][(row, j)] * resid));
                }
            }
            entries.push((l.phi(0), mu_cache[0] - self.nu[l.phi(0)]));
            entries.push((l.phi(1), mu_cache[1] - self.nu[l.phi(1)]));
            if l.alpha > 0 {
                let stratum = if arm == 0 {
                    Stratum::RctArm0.index()
                } else {
                    Stratum::RctArm1.index()
                };
                let eps = outer_row_of_pos[arm].contains_key(&(pos as u32));
                let resid = if eps { 1.0 } else { 0.0 } - self.alpha_hat[stratum];
                entries.push((l.alpha_block().start + stratum, resid));
            }
            add(&mut q, &entries);
        }

        // Mirror the upper triangle and normalize.
        for i in 0..l.len() {
            for j in 0..i {
                q[(i, j)] = q[(j, i)];
            }
        }
        q / f.n as f64
    }

    /// `V_n = W_n⁻¹ Q_n (W_n⁻¹)ᵀ`, symmetrized.
    pub fn v_matrix(&self) -> Result<DMatrix<f64>, InferenceError> {
        let w = self.w_matrix()?;
        let q = self.q_matrix();
        let lu = w.lu();
        let a = lu.solve(&q).ok_or(InferenceError::SingularW)?;
        // V = (W⁻¹ Q) W⁻ᵀ = (W⁻¹ (W⁻¹ Q)ᵀ)ᵀ
        let v = lu
            .solve(&a.transpose())
            .ok_or(InferenceError::SingularW)?
            .transpose();
        Ok((&v + v.transpose()) * 0.5)
    }

    /// Indices of the `(φ₀, φ₁)` entries in the stacked vector.
    pub fn phi_indices(&self) -> (usize, usize) {
        (self.layout.phi(0), self.layout.phi(1))
    }
}

/// Sandwich variance for the plug-in estimator of `(θ₀, θ₁)` and `log(1−VE)`.
pub fn sandwich_variance(
    pipeline: &TransportPipeline,
    fit: &TransportFit,
    mode: PiBlockMode,
) -> Result<VarianceReport, InferenceError> {
    let system = StackedSystem::new(pipeline, fit, mode)?;
    let v = system.v_matrix()?;
    let (i0, i1) = system.phi_indices();
    let n = pipeline.n() as f64;
    let cov = Matrix2::new(
        v[(i0, i0)] / n,
        v[(i0, i1)] / n,
        v[(i1, i0)] / n,
        v[(i1, i1)] / n,
    );
    Ok(VarianceReport::from_cov(
        cov,
        fit.plug_in.theta0,
        fit.plug_in.theta1,
        VarianceMethod::Sandwich,
    ))
}

// ---------------------------------------------------------------------------
// Stratified bootstrap.
// ---------------------------------------------------------------------------

/// Drive `b` bootstrap replicates, each on its own deterministic stream
/// derived from `(seed, replicate index)`, and summarize the point estimates
/// by sample standard deviations. `replicate` is expected to resample within
/// strata and rerun the full estimation pipeline; replicates that fail are
/// discarded and counted, and more than 10% discards aborts.
pub fn stratified_bootstrap<F>(
    mut replicate: F,
    b: usize,
    seed: u64,
) -> Result<VarianceReport, InferenceError>
where
    F: FnMut(&mut ChaCha8Rng) -> Result<BootstrapDraw, EstimationError>,
{
    if b < 2 {
        return Err(InferenceError::TooFewReplicates(b));
    }
    let mut draws: Vec<BootstrapDraw> = Vec::with_capacity(b);
    let mut discarded = 0usize;
    for i in 0..b {
        let mut rng = substream(seed, &[domain::BOOTSTRAP, i as u64]);
        match replicate(&mut rng) {
            Ok(draw) => draws.push(draw),
            Err(_) => discarded += 1,
        }
    }
    if (discarded as f64) > MAX_DISCARD_FRACTION * b as f64 {
        return Err(InferenceError::UnstableResampling {
            discarded,
            requested: b,
            limit: MAX_DISCARD_FRACTION * 100.0,
        });
    }
    if draws.len() < 2 {
        return Err(InferenceError::TooFewReplicates(draws.len()));
    }
    let m = draws.len() as f64;
    let mean = |f: &dyn Fn(&BootstrapDraw) -> f64| draws.iter().map(|d| f(d)).sum::<f64>() / m;
    let mean0 = mean(&|d| d.theta0);
    let mean1 = mean(&|d| d.theta1);
    let mean_log = mean(&|d| d.log_one_minus_ve);
    let mut c00 = 0.0;
    let mut c11 = 0.0;
    let mut c01 = 0.0;
    let mut v_log = 0.0;
    for d in &draws {
        let d0 = d.theta0 - mean0;
        let d1 = d.theta1 - mean1;
        c00 += d0 * d0;
        c11 += d1 * d1;
        c01 += d0 * d1;
        let dl = d.log_one_minus_ve - mean_log;
        v_log += dl * dl;
    }
    let denom = m - 1.0;
    Ok(VarianceReport {
        se_theta0: (c00 / denom).sqrt(),
        se_theta1: (c11 / denom).sqrt(),
        se_log_one_minus_ve: (v_log / denom).sqrt(),
        cov_theta: Matrix2::new(c00 / denom, c01 / denom, c01 / denom, c11 / denom),
        method: VarianceMethod::Bootstrap,
        b_reps: draws.len(),
        discarded_resamples: discarded,
    })
}

/// Stratified bootstrap of a fitted pipeline.
pub fn bootstrap_pipeline(
    pipeline: &TransportPipeline,
    b: usize,
    seed: u64,
) -> Result<VarianceReport, InferenceError> {
    let mut counts: Vec<u32> = Vec::new();
    stratified_bootstrap(
        |rng| pipeline.bootstrap_replicate(rng, &mut counts),
        b,
        seed,
    )
}

// ---------------------------------------------------------------------------
// Influence-function variance and Wald intervals.
// ---------------------------------------------------------------------------

/// Standard error from influence-function values: `√(Var̂/n)` with the
/// population-variance convention (divide by `n`).
pub fn eif_variance(values: &[f64]) -> Result<f64, InferenceError> {
    let n = values.len();
    if n < 2 {
        return Err(InferenceError::TooFewValues(n));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    Ok((var / n as f64).sqrt())
}

/// Full variance report from the projected EIF values of both arms.
pub fn eif_variance_report(
    projected0: &[f64],
    projected1: &[f64],
    theta0: f64,
    theta1: f64,
) -> Result<VarianceReport, InferenceError> {
    let n = projected0.len();
    if n < 2 || projected1.len() != n {
        return Err(InferenceError::TooFewValues(n.min(projected1.len())));
    }
    let nf = n as f64;
    let m0 = projected0.iter().sum::<f64>() / nf;
    let m1 = projected1.iter().sum::<f64>() / nf;
    let mut c00 = 0.0;
    let mut c11 = 0.0;
    let mut c01 = 0.0;
    for i in 0..n {
        let d0 = projected0[i] - m0;
        let d1 = projected1[i] - m1;
        c00 += d0 * d0;
        c11 += d1 * d1;
        c01 += d0 * d1;
    }
    let cov = Matrix2::new(c00, c01, c01, c11) / (nf * nf);
    let mut report = VarianceReport::from_cov(cov, theta0, theta1, VarianceMethod::Eif);
    report.method = VarianceMethod::Eif;
    Ok(report)
}

/// Two-sided normal quantile for a confidence level.
pub fn normal_quantile(level: f64) -> Result<f64, InferenceError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(InferenceError::BadLevel(level));
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(normal.inverse_cdf(0.5 + level / 2.0))
}

/// Wald interval `point ± z·se` on an untransformed scale.
pub fn wald_interval(point: f64, se: f64, level: f64) -> Result<(f64, f64), InferenceError> {
    let z = normal_quantile(level)?;
    Ok((point - z * se, point + z * se))
}

/// Wald interval for VE: built on the `log(1−VE)` scale and back-transformed
/// through the monotone decreasing map `1 − exp(·)`, so the lower log bound
/// yields the upper VE bound. Returned ordered `(ve_lower, ve_upper)`.
pub fn wald_interval_ve(
    estimate: &EffectEstimate,
    se_log: f64,
    level: f64,
) -> Result<(f64, f64), InferenceError> {
    let (log_lo, log_hi) = wald_interval(estimate.log_one_minus_ve, se_log, level)?;
    Ok((1.0 - log_hi.exp(), 1.0 - log_lo.exp()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn eif_variance_two_point() {
        // {−1, 1}: population variance 1, SE √(1/2).
        let se = eif_variance(&[-1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(se, (0.5f64).sqrt(), epsilon = 1e-12);
        assert!(eif_variance(&[1.0]).is_err());
    }

    #[test]
    fn eif_variance_constant_is_zero() {
        let se = eif_variance(&[0.42; 10]).unwrap();
        assert_abs_diff_eq!(se, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn wald_ve_degenerate_interval() {
        let est = EffectEstimate {
            theta0: 0.005,
            theta1: 0.0025,
            log_one_minus_ve: (0.5f64).ln(),
            ve: 0.5,
            method: crate::estimators::EstimatorKind::PlugIn,
            bias: crate::estimators::BiasSpecification::ZERO,
        };
        let (lo, hi) = wald_interval_ve(&est, 0.0, 0.95).unwrap();
        assert_abs_diff_eq!(lo, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(hi, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn wald_ve_table_style_interval() {
        // log(1−VE) = log 0.5 with se 0.156 → VE interval ≈ (0.32, 0.63).
        let est = EffectEstimate {
            theta0: 0.005,
            theta1: 0.0025,
            log_one_minus_ve: (0.5f64).ln(),
            ve: 0.5,
            method: crate::estimators::EstimatorKind::PlugIn,
            bias: crate::estimators::BiasSpecification::ZERO,
        };
        let (lo, hi) = wald_interval_ve(&est, 0.156, 0.95).unwrap();
        let z = normal_quantile(0.95).unwrap();
        let expect_lo = 1.0 - 0.5f64 * (z * 0.156).exp();
        let expect_hi = 1.0 - 0.5f64 * (-z * 0.156).exp();
        assert_abs_diff_eq!(lo, expect_lo, epsilon = 1e-12);
        assert_abs_diff_eq!(hi, expect_hi, epsilon = 1e-12);
        assert!((0.31..0.34).contains(&lo), "lo = {lo}");
        assert!((0.62..0.64).contains(&hi), "hi = {hi}");
        assert!(lo < hi);
    }

    #[test]
    fn wald_rejects_bad_level() {
        assert!(normal_quantile(0.0).is_err());
        assert!(normal_quantile(1.0).is_err());
        assert!(normal_quantile(1.7).is_err());
    }

    #[test]
    fn bootstrap_constant_pipeline_has_zero_se() {
        let report = stratified_bootstrap(
            |_rng| {
                Ok(BootstrapDraw {
                    theta0: 0.005,
                    theta1: 0.004,
                    log_one_minus_ve: (0.8f64).ln(),
                })
            },
            50,
            7,
        )
        .unwrap();
        assert_abs_diff_eq!(report.se_theta0, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(report.se_log_one_minus_ve, 0.0, epsilon = 1e-15);
        assert_eq!(report.b_reps, 50);
    }

    #[test]
    fn bootstrap_discard_limit() {
        let mut i = 0usize;
        let result = stratified_bootstrap(
            |_rng| {
                i += 1;
                if i % 2 == 0 {
                    Err(EstimationError::EmptyArmSubset { arm: 0 })
                } else {
                    Ok(BootstrapDraw {
                        theta0: 0.005,
                        theta1: 0.004,
                        log_one_minus_ve: 0.0,
                    })
                }
            },
            20,
            7,
        );
        assert!(matches!(
            result,
            Err(InferenceError::UnstableResampling { .. })
        ));
    }

    #[test]
    fn bootstrap_needs_two_replicates() {
        let result = stratified_bootstrap(
            |_rng| {
                Ok(BootstrapDraw {
                    theta0: 1.0,
                    theta1: 1.0,
                    log_one_minus_ve: 0.0,
                })
            },
            1,
            7,
        );
        assert!(matches!(result, Err(InferenceError::TooFewReplicates(1))));
    }
}
