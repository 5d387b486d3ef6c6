//! Expected-KL robustness of tempered posteriors to misspecification.
//!
//! With `ε_n` the probability that the working model is misspecified, the
//! criterion weighs `KL(true posterior ‖ α-posterior)` by `ε_n` and
//! `KL(regular posterior ‖ α-posterior)` by `1 − ε_n`. Its Gaussian
//! surrogate replaces every posterior by its large-sample normal limit:
//!
//! ```text
//! r*(α) = ½ (α·A_n(V) − p·log α + B_n(V))
//! A_n(Σ) = ε_n tr(ΣΩ) + (1−ε_n) tr(ΣV⁻¹) + n ε_n (θ̂_F − θ̂_G)ᵀ Σ (θ̂_F − θ̂_G)
//! B_n(Σ) = −p + ε_n log(|Ω|⁻¹|Σ|⁻¹) + (1−ε_n) log(|V⁻¹|⁻¹|Σ|⁻¹)
//! ```
//!
//! and is minimized at `α* = p/A_n(V)`. The mean-field variant uses
//! `Ṽ = diag(V)` in place of `V` for the reported distribution.

use nalgebra::{DMatrix, DVector};

use crate::alpha_posterior::check_positive;
use crate::error::{Error, Result};
use crate::gauss::{kl_gaussian, GaussianDist};
use crate::linalg;
use crate::optim;

/// Population-level inputs: true and pseudo-true parameters, curvature `V`,
/// true-posterior covariance scale `Ω` and `ε = lim n·ε_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct MisspecScenario {
    pub theta0: DVector<f64>,
    pub theta_star: DVector<f64>,
    pub curvature: DMatrix<f64>,
    pub omega: DMatrix<f64>,
    pub eps: f64,
}

impl MisspecScenario {
    pub fn new(
        theta0: DVector<f64>,
        theta_star: DVector<f64>,
        curvature: DMatrix<f64>,
        omega: DMatrix<f64>,
        eps: f64,
    ) -> Result<Self> {
        let p = linalg::check_square(&curvature)?;
        linalg::check_len(&theta0, p)?;
        linalg::check_len(&theta_star, p)?;
        if linalg::check_square(&omega)? != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: omega.nrows(),
            });
        }
        linalg::spd_cholesky(&curvature)?;
        linalg::spd_cholesky(&omega)?;
        check_positive("eps", eps)?;
        Ok(Self {
            theta0,
            theta_star,
            curvature,
            omega,
            eps,
        })
    }

    pub fn dim(&self) -> usize {
        self.theta0.len()
    }

    /// `Ṽ = diag(V)`.
    pub fn curvature_diag(&self) -> DMatrix<f64> {
        linalg::diag_part(&self.curvature)
    }

    /// `d = θ₀ − θ*`.
    pub fn bias(&self) -> DVector<f64> {
        &self.theta0 - &self.theta_star
    }

    /// `dᵀ V d`.
    pub fn d_quad(&self) -> f64 {
        linalg::quad_form(&self.curvature, &self.bias())
    }

    /// `dᵀ Ṽ d`.
    pub fn d_quad_diag(&self) -> f64 {
        linalg::quad_form(&self.curvature_diag(), &self.bias())
    }

    /// `tr(Ṽ V⁻¹) ≥ p`.
    pub fn trace_diag_ratio(&self) -> f64 {
        let vinv = linalg::spd_inverse(&self.curvature).expect("validated SPD");
        // Rounding can land just below the exact lower bound.
        linalg::trace_of_product(&self.curvature_diag(), &vinv).max(self.dim() as f64)
    }
}

/// Finite-sample ingredients: ML estimators under the working and the
/// correctly specified model, the sample size, and `ε_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteSampleInputs {
    pub theta_hat_f: DVector<f64>,
    pub theta_hat_g: DVector<f64>,
    pub n: usize,
    pub eps_n: f64,
}

impl FiniteSampleInputs {
    pub fn new(theta_hat_f: DVector<f64>, theta_hat_g: DVector<f64>, n: usize, eps_n: f64) -> Result<Self> {
        linalg::check_len(&theta_hat_g, theta_hat_f.len())?;
        if n == 0 {
            return Err(Error::invalid("n", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&eps_n) {
            return Err(Error::invalid("eps_n", "must lie in [0, 1]"));
        }
        Ok(Self {
            theta_hat_f,
            theta_hat_g,
            n,
            eps_n,
        })
    }

    /// Uses the default `ε_n = ε/n` so that `n·ε_n → ε` exactly.
    pub fn with_default_eps(theta_hat_f: DVector<f64>, theta_hat_g: DVector<f64>, n: usize, eps: f64) -> Result<Self> {
        Self::new(theta_hat_f, theta_hat_g, n, (eps / n as f64).min(1.0))
    }

    /// Evaluates the ML estimators at their probability limits (θ* and θ₀).
    pub fn at_limits(s: &MisspecScenario, n: usize) -> Result<Self> {
        Self::with_default_eps(s.theta_star.clone(), s.theta0.clone(), n, s.eps)
    }
}

fn check_inputs(sigma: &DMatrix<f64>, s: &MisspecScenario, f: &FiniteSampleInputs) -> Result<()> {
    let p = s.dim();
    for len in [sigma.nrows(), sigma.ncols(), f.theta_hat_f.len()] {
        if len != p {
            return Err(Error::DimensionMismatch { expected: p, got: len });
        }
    }
    Ok(())
}

/// `A_n(Σ) = ε_n tr(ΣΩ) + (1−ε_n) tr(ΣV⁻¹) + n ε_n δᵀΣδ`, `δ = θ̂_F − θ̂_G`.
pub fn a_n(sigma: &DMatrix<f64>, s: &MisspecScenario, f: &FiniteSampleInputs) -> Result<f64> {
    check_inputs(sigma, s, f)?;
    let vinv = linalg::spd_inverse(&s.curvature)?;
    let delta = &f.theta_hat_f - &f.theta_hat_g;
    Ok(f.eps_n * linalg::trace_of_product(sigma, &s.omega)
        + (1.0 - f.eps_n) * linalg::trace_of_product(sigma, &vinv)
        + f.n as f64 * f.eps_n * linalg::quad_form(sigma, &delta))
}

/// `B_n(Σ) = −p + ε_n log(|Ω|⁻¹|Σ|⁻¹) + (1−ε_n) log(|V|·|Σ|⁻¹)`.
pub fn b_n(sigma: &DMatrix<f64>, s: &MisspecScenario, f: &FiniteSampleInputs) -> Result<f64> {
    check_inputs(sigma, s, f)?;
    let ld_sigma = linalg::spd_log_det(sigma)?;
    let ld_omega = linalg::spd_log_det(&s.omega)?;
    let ld_v = linalg::spd_log_det(&s.curvature)?;
    Ok(-(s.dim() as f64) + f.eps_n * (-ld_omega - ld_sigma) + (1.0 - f.eps_n) * (ld_v - ld_sigma))
}

fn surrogate_closed_form(alpha: f64, sigma: &DMatrix<f64>, s: &MisspecScenario, f: &FiniteSampleInputs) -> Result<f64> {
    check_positive("alpha", alpha)?;
    let p = s.dim() as f64;
    Ok(0.5 * (alpha * a_n(sigma, s, f)? - p * alpha.ln() + b_n(sigma, s, f)?))
}

/// Surrogate criterion for the α-posterior, via the `A_n`/`B_n` algebra.
pub fn r_star(alpha: f64, s: &MisspecScenario, f: &FiniteSampleInputs) -> Result<f64> {
    surrogate_closed_form(alpha, &s.curvature, s, f)
}

/// Surrogate criterion for the mean-field α-posterior (`Ṽ = diag(V)`).
pub fn r_tilde_star(alpha: f64, s: &MisspecScenario, f: &FiniteSampleInputs) -> Result<f64> {
    surrogate_closed_form(alpha, &s.curvature_diag(), s, f)
}

/// The Gaussian pairs entering the surrogate: true-posterior limit
/// `N(θ̂_G, Ω/n)`, regular-posterior limit `N(θ̂_F, V⁻¹/n)` and the reported
/// `N(θ̂_F, Σ⁻¹/(αn))`.
fn surrogate_direct(alpha: f64, sigma: &DMatrix<f64>, s: &MisspecScenario, f: &FiniteSampleInputs) -> Result<f64> {
    check_positive("alpha", alpha)?;
    check_inputs(sigma, s, f)?;
    let n = f.n as f64;
    let truth = GaussianDist::new(f.theta_hat_g.clone(), &s.omega / n)?;
    let regular = GaussianDist::new(f.theta_hat_f.clone(), linalg::spd_inverse(&s.curvature)? / n)?;
    let reported = GaussianDist::new(f.theta_hat_f.clone(), linalg::spd_inverse(sigma)? / (alpha * n))?;
    exact_expected_kl(&truth, &reported, &regular, f.eps_n)
}

/// [`r_star`] evaluated directly as a weighted sum of Gaussian KL divergences.
pub fn r_star_direct(alpha: f64, s: &MisspecScenario, f: &FiniteSampleInputs) -> Result<f64> {
    surrogate_direct(alpha, &s.curvature, s, f)
}

/// [`r_tilde_star`] evaluated directly as a weighted sum of Gaussian KLs.
pub fn r_tilde_star_direct(alpha: f64, s: &MisspecScenario, f: &FiniteSampleInputs) -> Result<f64> {
    surrogate_direct(alpha, &s.curvature_diag(), s, f)
}

fn optimal_for(sigma: &DMatrix<f64>, s: &MisspecScenario, f: &FiniteSampleInputs) -> Result<f64> {
    let a = a_n(sigma, s, f)?;
    assert!(a > 0.0, "A_n must be positive for SPD inputs, got {a}");
    Ok(s.dim() as f64 / a)
}

/// `α*_n = p / A_n(V)`, the unique minimizer of [`r_star`].
pub fn optimal_alpha(s: &MisspecScenario, f: &FiniteSampleInputs) -> Result<f64> {
    optimal_for(&s.curvature, s, f)
}

/// `α̃*_n = p / A_n(diag(V))`, the unique minimizer of [`r_tilde_star`].
pub fn optimal_alpha_tilde(s: &MisspecScenario, f: &FiniteSampleInputs) -> Result<f64> {
    optimal_for(&s.curvature_diag(), s, f)
}

/// `lim α*_n = p / (p + ε dᵀVd)`.
pub fn limit_alpha_star(s: &MisspecScenario) -> f64 {
    let p = s.dim() as f64;
    p / (p + s.eps * s.d_quad())
}

/// `lim α̃*_n = p / (tr(ṼV⁻¹) + ε dᵀṼd)`.
pub fn limit_alpha_tilde(s: &MisspecScenario) -> f64 {
    s.dim() as f64 / (s.trace_diag_ratio() + s.eps * s.d_quad_diag())
}

/// Limit of the exact criterion, `½(αp + αε·d_quad − p log α − p)`.
pub fn r_infinity(alpha: f64, p: usize, eps: f64, d_quad: f64) -> Result<f64> {
    check_positive("alpha", alpha)?;
    let p = p as f64;
    Ok(0.5 * (alpha * p + alpha * eps * d_quad - p * alpha.ln() - p))
}

/// Limit of the mean-field criterion,
/// `½(α(tr(ṼV⁻¹) + ε dᵀṼd) − p log α − p + log(|V|/|Ṽ|))`.
pub fn r_tilde_infinity(alpha: f64, s: &MisspecScenario) -> Result<f64> {
    check_positive("alpha", alpha)?;
    let p = s.dim() as f64;
    let a = s.trace_diag_ratio() + s.eps * s.d_quad_diag();
    Ok(0.5 * (alpha * a - p * alpha.ln() - p + log_det_ratio(s)))
}

/// `log(|V| / |diag(V)|) ≤ 0` (Hadamard).
fn log_det_ratio(s: &MisspecScenario) -> f64 {
    let ld_v = linalg::spd_log_det(&s.curvature).expect("validated SPD");
    let ld_diag: f64 = s.curvature.diagonal().iter().map(|v| v.ln()).sum();
    (ld_v - ld_diag).min(0.0)
}

/// `lim r*_n(α*_n) = ½[−p log p + p log(p + ε dᵀVd)]`.
pub fn optimized_limit_kl(s: &MisspecScenario) -> f64 {
    let p = s.dim() as f64;
    0.5 * (-p * p.ln() + p * (p + s.eps * s.d_quad()).ln())
}

/// `lim r̃*_n(α̃*_n) = ½[−p log p + p log(tr(ṼV⁻¹) + ε dᵀṼd) + log(|V|/|Ṽ|)]`.
pub fn optimized_limit_kl_var(s: &MisspecScenario) -> f64 {
    let p = s.dim() as f64;
    0.5 * (-p * p.ln() + p * (s.trace_diag_ratio() + s.eps * s.d_quad_diag()).ln() + log_det_ratio(s))
}

/// Expected KL `ε_n·KL(target ‖ reported) + (1−ε_n)·KL(regular ‖ reported)`.
///
/// `target` is the true posterior; `reported` the α-posterior (or its
/// mean-field approximation); `regular` the α = 1 posterior.
pub fn exact_expected_kl(
    target: &GaussianDist,
    reported: &GaussianDist,
    regular: &GaussianDist,
    eps_n: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&eps_n) {
        return Err(Error::invalid("eps_n", "must lie in [0, 1]"));
    }
    let mis = if eps_n > 0.0 { kl_gaussian(target, reported)? } else { 0.0 };
    let cor = if eps_n < 1.0 { kl_gaussian(regular, reported)? } else { 0.0 };
    Ok(eps_n * mis + (1.0 - eps_n) * cor)
}

/// Target for the misspecified branch of [`exact_expected_kl_with`].
#[derive(Debug, Clone, Copy)]
pub enum MisspecTarget<'a> {
    /// The true (correct-model) posterior.
    TruePosterior,
    /// Keep the true-posterior mean but swap in a sandwich covariance.
    Sandwich(&'a DMatrix<f64>),
}

/// [`exact_expected_kl`] with an optional sandwich-covariance target.
pub fn exact_expected_kl_with(
    true_post: &GaussianDist,
    reported: &GaussianDist,
    regular: &GaussianDist,
    eps_n: f64,
    target: MisspecTarget<'_>,
) -> Result<f64> {
    match target {
        MisspecTarget::TruePosterior => exact_expected_kl(true_post, reported, regular, eps_n),
        MisspecTarget::Sandwich(cov) => {
            let swapped = GaussianDist::new(true_post.mean().clone(), cov.clone())?;
            exact_expected_kl(&swapped, reported, regular, eps_n)
        }
    }
}

/// Surrogate (and optionally exact) criteria tabulated over an α-grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessCurve {
    pub alphas: Vec<f64>,
    pub r_star: Vec<f64>,
    pub r_tilde_star: Vec<f64>,
    pub r_exact: Option<Vec<f64>>,
}

impl RobustnessCurve {
    /// Evaluates the surrogates on `alphas` (sorted ascending, positive) and,
    /// when `exact` is given, the exact criterion `exact(α)` as well.
    pub fn evaluate<E>(alphas: &[f64], s: &MisspecScenario, f: &FiniteSampleInputs, exact: Option<E>) -> Result<Self>
    where
        E: Fn(f64) -> Result<f64> + Sync + Send,
    {
        if alphas.is_empty() || alphas.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::invalid("alphas", "need a non-empty list of positive values"));
        }
        if alphas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("alphas", "must be strictly increasing"));
        }
        let rows = crate::exec::try_map_indices(alphas.len(), |i| -> Result<(f64, f64, Option<f64>)> {
            let a = alphas[i];
            let ex = match &exact {
                Some(e) => Some(e(a)?),
                None => None,
            };
            Ok((r_star(a, s, f)?, r_tilde_star(a, s, f)?, ex))
        })?;
        let curve = Self {
            alphas: alphas.to_vec(),
            r_star: rows.iter().map(|r| r.0).collect(),
            r_tilde_star: rows.iter().map(|r| r.1).collect(),
            r_exact: exact.as_ref().map(|_| rows.iter().map(|r| r.2.unwrap_or(f64::NAN)).collect()),
        };
        if curve.r_star.iter().chain(&curve.r_tilde_star).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("robustness curve value"));
        }
        Ok(curve)
    }

    pub fn argmin_r_star(&self) -> f64 {
        self.alphas[optim::argmin(&self.r_star).expect("non-empty curve")]
    }

    pub fn argmin_r_tilde_star(&self) -> f64 {
        self.alphas[optim::argmin(&self.r_tilde_star).expect("non-empty curve")]
    }

    pub fn argmin_r_exact(&self) -> Option<f64> {
        let ex = self.r_exact.as_ref()?;
        optim::argmin(ex).map(|i| self.alphas[i])
    }
}

/// Evenly spaced α-grid on `[lo, hi]` with `len` points.
pub fn alpha_grid(lo: f64, hi: f64, len: usize) -> Vec<f64> {
    assert!(len >= 2 && lo < hi);
    (0..len).map(|i| lo + (hi - lo) * i as f64 / (len - 1) as f64).collect()
}
