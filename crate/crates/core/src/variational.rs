//! Gaussian mean-field (diagonal-covariance) approximations.
//!
//! Two projections are provided: the closed form onto a Gaussian target,
//! where the optimal variances are the reciprocal diagonal of the target
//! precision, and a numerical KL minimization onto a tabulated target.
//!
//! The evidence-lower-bound form `E_q[log f_n] − (1/α)·KL(q‖π)` is
//! *maximized* by the KL projection onto the α-posterior; some printed
//! statements write it as an arg min, which would select the wrong end.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::alpha_posterior::{check_positive, LikelihoodEvaluator};
use crate::error::{Error, Result};
use crate::gauss::{GaussianDist, GridDensity};
use crate::linalg;
use crate::quadrature::GaussHermite;

/// Convergence threshold on the sup-norm of the (scaled) gradient.
pub const GRADIENT_TOL: f64 = 1e-8;

/// Iteration cap for [`gmf_project_numeric`].
pub const MAX_ITERATIONS: usize = 500;

/// Quadrature nodes with at least this tensor weight must lie inside the grid.
const COVERAGE_WEIGHT: f64 = 1e-12;

/// Largest dimension accepted by tensor Gauss–Hermite evaluation.
const MAX_QUADRATURE_DIM: usize = 3;

/// A member of the Gaussian mean-field family: independent coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussian {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: DVector<f64>, var: DVector<f64>) -> Result<Self> {
        linalg::check_len(&var, mean.len())?;
        if var.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("var", "variances must be positive and finite"));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("mean"));
        }
        Ok(Self { mean, var })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cov(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.var)
    }

    pub fn to_gaussian(&self) -> GaussianDist {
        GaussianDist::new(self.mean.clone(), self.cov()).expect("positive diagonal covariance")
    }

    /// `E_q[log q] = −½ Σ (1 + log 2π v_j)`.
    pub fn neg_entropy(&self) -> f64 {
        -0.5 * self.var.iter().map(|v| 1.0 + (2.0 * PI * v).ln()).sum::<f64>()
    }

    /// Quadrature nodes `μ + σ∘z_k` and weights of the tensor Gauss–Hermite rule.
    fn quadrature_points(&self) -> Result<Vec<(f64, Vec<f64>)>> {
        let p = self.dim();
        if p == 0 || p > MAX_QUADRATURE_DIM {
            return Err(Error::UnsupportedDimension {
                dim: p,
                what: "Gauss-Hermite expectation",
            });
        }
        let gh = GaussHermite::standard();
        let sd: Vec<f64> = self.var.iter().map(|v| v.sqrt()).collect();
        let k = gh.len();
        let total = k.pow(p as u32);
        Ok((0..total)
            .map(|mut idx| {
                let mut w = 1.0;
                let mut x = vec![0.0; p];
                for j in (0..p).rev() {
                    let i = idx % k;
                    idx /= k;
                    w *= gh.weights[i];
                    x[j] = self.mean[j] + sd[j] * gh.nodes[i];
                }
                (w, x)
            })
            .collect())
    }

    /// `E_q[f]` by tensor Gauss–Hermite quadrature (32 nodes per axis).
    pub fn expect<F: Fn(&[f64]) -> f64>(&self, f: F) -> Result<f64> {
        let mut total = 0.0;
        for (w, x) in self.quadrature_points()? {
            let v = f(&x);
            if !v.is_finite() {
                return Err(Error::NonFinite("integrand at a quadrature node"));
            }
            total += w * v;
        }
        Ok(total)
    }
}

/// Closed-form KL projection of a Gaussian onto the mean-field family:
/// same mean, `var_j = 1/(Σ⁻¹)_{jj}`.
pub fn gmf_project_gaussian(target: &GaussianDist) -> DiagonalGaussian {
    let prec = target.precision();
    DiagonalGaussian {
        mean: target.mean().clone(),
        var: prec.diagonal().map(|d| 1.0 / d),
    }
}

/// Mean-field limit `N(θ̂_ML, diag(V)⁻¹/(αn))`.
pub fn variational_bvm_limit(
    theta_hat_ml: &DVector<f64>,
    curvature: &DMatrix<f64>,
    n: usize,
    alpha: f64,
) -> Result<DiagonalGaussian> {
    check_positive("alpha", alpha)?;
    let p = linalg::check_square(curvature)?;
    linalg::check_len(theta_hat_ml, p)?;
    linalg::spd_cholesky(curvature)?;
    let an = alpha * n as f64;
    DiagonalGaussian::new(theta_hat_ml.clone(), curvature.diagonal().map(|v| 1.0 / (an * v)))
}

/// Diagonal Gaussian with the grid target's mean and marginal variances;
/// the documented default starting point for [`gmf_project_numeric`].
pub fn moment_matched(target: &GridDensity) -> Result<DiagonalGaussian> {
    let cov = target.covariance();
    DiagonalGaussian::new(target.mean(), cov.diagonal())
}

/// `KL(q ‖ target)` for a tabulated target, with `E_q[log target]` by
/// Gauss–Hermite quadrature against the interpolated grid log density.
pub fn kl_to_grid(q: &DiagonalGaussian, target: &GridDensity) -> Result<f64> {
    check_dims(q, target)?;
    let cross = q.expect(|x| target.interp_log_density(x).value)?;
    Ok(q.neg_entropy() - cross)
}

fn check_dims(q: &DiagonalGaussian, target: &GridDensity) -> Result<()> {
    if q.dim() != target.dim() {
        return Err(Error::DimensionMismatch {
            expected: target.dim(),
            got: q.dim(),
        });
    }
    if target.dim() > 2 {
        return Err(Error::UnsupportedDimension {
            dim: target.dim(),
            what: "numeric mean-field projection",
        });
    }
    Ok(())
}

/// KL objective over `φ = (μ, log v)` with gradient and Hessian.
struct Objective<'a> {
    target: &'a GridDensity,
    p: usize,
}

struct Eval {
    value: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
}

impl Objective<'_> {
    fn unpack(&self, phi: &DVector<f64>) -> DiagonalGaussian {
        let p = self.p;
        DiagonalGaussian {
            mean: phi.rows(0, p).into_owned(),
            var: phi.rows(p, p).map(f64::exp),
        }
    }

    fn eval(&self, phi: &DVector<f64>) -> Eval {
        let p = self.p;
        let q = self.unpack(phi);
        let sd: Vec<f64> = q.var.iter().map(|v| v.sqrt()).collect();
        let gh = GaussHermite::standard();
        let k = gh.len();
        // F = E[f(μ + σ∘z)] and its derivatives in (μ, ℓ), ∂θ_j/∂ℓ_j = ½σ_j z_j
        let mut f = 0.0;
        let mut g = DVector::<f64>::zeros(2 * p);
        let mut h = DMatrix::<f64>::zeros(2 * p, 2 * p);
        for idx in 0..k.pow(p as u32) {
            let mut rem = idx;
            let mut w = 1.0;
            let mut z = [0.0; 2];
            let mut x = [0.0; 2];
            for j in (0..p).rev() {
                let i = rem % k;
                rem /= k;
                w *= gh.weights[i];
                z[j] = gh.nodes[i];
                x[j] = q.mean[j] + sd[j] * z[j];
            }
            let local = self.target.interp_log_density(&x[..p]);
            let dl: Vec<f64> = (0..p).map(|j| 0.5 * sd[j] * z[j]).collect();
            f += w * local.value;
            for i in 0..p {
                g[i] += w * local.grad[i];
                g[p + i] += w * local.grad[i] * dl[i];
                h[(p + i, p + i)] += w * local.grad[i] * 0.5 * dl[i];
                for j in 0..p {
                    let hij = local.hess[i][j];
                    h[(i, j)] += w * hij;
                    h[(i, p + j)] += w * hij * dl[j];
                    h[(p + i, p + j)] += w * hij * dl[i] * dl[j];
                }
            }
        }
        for i in 0..p {
            for j in 0..p {
                h[(p + j, i)] = h[(i, p + j)];
            }
        }
        let mut grad = -g;
        for i in 0..p {
            grad[p + i] -= 0.5;
        }
        Eval {
            value: q.neg_entropy() - f,
            grad,
            hess: -h,
        }
    }

    /// Gradient with mean components expressed per standard deviation.
    fn scaled_grad_norm(&self, phi: &DVector<f64>, grad: &DVector<f64>) -> f64 {
        let p = self.p;
        (0..2 * p)
            .map(|i| {
                if i < p {
                    (grad[i] * (0.5 * phi[p + i]).exp()).abs()
                } else {
                    grad[i].abs()
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Numerical KL projection of a tabulated density (dimension ≤ 2) onto the
/// mean-field family, by damped Newton descent on `(mean, log var)` with the
/// KL evaluated by 32-node Gauss–Hermite quadrature per axis.
///
/// Converges when the gradient sup-norm (mean components measured per
/// standard deviation of `q`) falls below [`GRADIENT_TOL`].
pub fn gmf_project_numeric(target: &GridDensity, init: &DiagonalGaussian) -> Result<DiagonalGaussian> {
    check_dims(init, target)?;
    let p = target.dim();
    let obj = Objective { target, p };
    let mut phi = DVector::from_iterator(
        2 * p,
        init.mean.iter().copied().chain(init.var.iter().map(|v| v.ln())),
    );
    let mut cur = obj.eval(&phi);
    let mut gnorm = obj.scaled_grad_norm(&phi, &cur.grad);
    let mut iterations = 0;
    while gnorm >= GRADIENT_TOL {
        if iterations == MAX_ITERATIONS || !cur.value.is_finite() {
            return Err(Error::NoConvergence {
                iterations,
                gradient: gnorm,
            });
        }
        iterations += 1;
        let dir = newton_direction(&cur);
        let mut step = 1.0;
        let mut accepted = false;
        let noise = 1e-13 * cur.value.abs().max(1.0);
        while step > 1e-12 {
            let cand = &phi + &dir * step;
            let next = obj.eval(&cand);
            let cand_norm = obj.scaled_grad_norm(&cand, &next.grad);
            let decrease = next.value < cur.value + 1e-4 * step * cur.grad.dot(&dir);
            let flat = (next.value - cur.value).abs() <= noise && cand_norm < gnorm;
            if next.value.is_finite() && (decrease || flat) {
                phi = cand;
                cur = next;
                gnorm = cand_norm;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(Error::NoConvergence {
                iterations,
                gradient: gnorm,
            });
        }
    }
    let q = obj.unpack(&phi);
    check_coverage(&q, target)?;
    Ok(q)
}

fn newton_direction(e: &Eval) -> DVector<f64> {
    let n = e.grad.len();
    let mut shift = 0.0;
    let scale = e.hess.diagonal().amax().max(1e-12);
    for _ in 0..60 {
        let h = &e.hess + DMatrix::identity(n, n) * shift;
        if let Some(chol) = nalgebra::Cholesky::new(h) {
            let mut d = -chol.solve(&e.grad);
            // keep log-variance moves moderate
            let p = n / 2;
            let cap = (p..n).map(|i| d[i].abs()).fold(0.0, f64::max);
            if cap > 2.0 {
                d *= 2.0 / cap;
            }
            return d;
        }
        shift = if shift == 0.0 { 1e-8 * scale } else { shift * 10.0 };
    }
    -e.grad.clone()
}

fn check_coverage(q: &DiagonalGaussian, target: &GridDensity) -> Result<()> {
    let uncovered = q
        .quadrature_points()?
        .into_iter()
        .any(|(w, x)| w > COVERAGE_WEIGHT && !target.contains(&x));
    if uncovered {
        return Err(Error::SupportNotCovered);
    }
    Ok(())
}

/// `E_q[log f_n(Xⁿ|θ)] − (1/α)·KL(q‖π)` with both expectations by
/// Gauss–Hermite quadrature. `log_prior` must be a normalized log density.
/// Up to a `q`-independent constant this is `−(1/α)·KL(q‖π_{n,α})`, so its
/// maximizer over the mean-field family is the mean-field α-posterior.
pub fn penalized_objective<L, P>(q: &DiagonalGaussian, lik: &L, log_prior: P, alpha: f64) -> Result<f64>
where
    L: LikelihoodEvaluator + ?Sized,
    P: Fn(&[f64]) -> f64,
{
    check_positive("alpha", alpha)?;
    if q.dim() != lik.dim() {
        return Err(Error::DimensionMismatch {
            expected: lik.dim(),
            got: q.dim(),
        });
    }
    let expected_lik = q.expect(|x| lik.log_lik(x))?;
    let kl_prior = q.neg_entropy() - q.expect(&log_prior)?;
    Ok(expected_lik - kl_prior / alpha)
}
