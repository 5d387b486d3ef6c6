//! α-posteriors `π_{n,α}(θ) ∝ f_n(Xⁿ|θ)^α π(θ)`.
//!
//! Two constructions are provided: the closed form for the Gaussian linear
//! model with a conjugate prior, and a tabulated density for arbitrary
//! likelihood/prior pairs in one or two dimensions.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::gauss::{GaussianDist, GridAxis, GridDensity};
use crate::linalg;
use crate::quadrature::normal_sf;

/// Draws used by the Monte Carlo branch of [`concentration_probability`].
pub const CONCENTRATION_MC_DRAWS: usize = 100_000;

/// Relative pivot size below which the normal equations count as singular.
pub const SINGULAR_PIVOT_TOL: f64 = 1e-12;

/// Minimum nodes per axis for [`grid_alpha_posterior`].
pub const MIN_GRID_NODES: usize = 101;

/// Half-width of the default grid box in limiting standard deviations.
pub const DEFAULT_BOX_HALF_WIDTH: f64 = 10.0;

/// Gaussian prior `θ ~ N(μ_π, σ_u² Σ_π⁻¹)`, parameterized by the
/// precision-scale matrix `Σ_π`. `Σ_π = 0` is the flat-prior limit.
#[derive(Debug, Clone, PartialEq)]
pub struct ConjugatePrior {
    pub mean: DVector<f64>,
    pub precision_scale: DMatrix<f64>,
}

impl ConjugatePrior {
    pub fn new(mean: DVector<f64>, precision_scale: DMatrix<f64>) -> Result<Self> {
        let p = linalg::check_square(&precision_scale)?;
        linalg::check_len(&mean, p)?;
        linalg::check_symmetric(&precision_scale)?;
        if p > 0 && linalg::min_eigenvalue(&precision_scale) < -1e-12 {
            return Err(Error::invalid("precision_scale", "must be positive semi-definite"));
        }
        Ok(Self {
            mean,
            precision_scale: linalg::symmetrize(&precision_scale),
        })
    }

    pub fn flat(p: usize) -> Self {
        Self {
            mean: DVector::zeros(p),
            precision_scale: DMatrix::zeros(p, p),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn is_flat(&self) -> bool {
        self.precision_scale.iter().all(|v| *v == 0.0)
    }

    /// Normalized log density; only defined for an invertible `Σ_π`.
    pub fn log_density(&self, sigma_u: f64, theta: &[f64]) -> Result<f64> {
        let cov = linalg::spd_inverse(&self.precision_scale)? * (sigma_u * sigma_u);
        let g = GaussianDist::new(self.mean.clone(), cov)?;
        g.log_density(&DVector::from_column_slice(theta))
    }
}

/// Sufficient statistics of a linear-regression sample:
/// `n`, `Σ WᵢWᵢᵀ`, `Σ WᵢYᵢ`, `Σ Yᵢ²`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionStats {
    pub n: usize,
    pub sum_ww: DMatrix<f64>,
    pub sum_wy: DVector<f64>,
    pub sum_yy: f64,
}

impl RegressionStats {
    pub fn from_data(w: &DMatrix<f64>, y: &DVector<f64>) -> Result<Self> {
        if w.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: w.nrows(),
                got: y.len(),
            });
        }
        if w.nrows() == 0 {
            return Err(Error::invalid("n", "need at least one observation"));
        }
        Ok(Self {
            n: w.nrows(),
            sum_ww: w.tr_mul(w),
            sum_wy: w.tr_mul(y),
            sum_yy: y.norm_squared(),
        })
    }

    pub fn dim(&self) -> usize {
        self.sum_wy.len()
    }

    /// Gaussian log-likelihood `−Σ(Yᵢ − θᵀWᵢ)²/(2σ²) − (n/2)log(2πσ²)`.
    pub fn log_likelihood(&self, sigma: f64, theta: &[f64]) -> f64 {
        let t = DVector::from_column_slice(theta);
        let rss = self.sum_yy - 2.0 * t.dot(&self.sum_wy) + linalg::quad_form(&self.sum_ww, &t);
        let s2 = sigma * sigma;
        -0.5 * rss / s2 - 0.5 * self.n as f64 * (2.0 * std::f64::consts::PI * s2).ln()
    }
}

/// Closed-form α-posterior for the Gaussian linear model:
/// mean `M⁻¹(Σ_π μ_π/(αn) + ΣWY/n)`, covariance `σ_u²/(αn) · M⁻¹` with
/// `M = ΣWWᵀ/n + Σ_π/(αn)`.
pub fn conjugate_alpha_posterior(
    w: &DMatrix<f64>,
    y: &DVector<f64>,
    prior: &ConjugatePrior,
    sigma_u: f64,
    alpha: f64,
) -> Result<GaussianDist> {
    conjugate_alpha_posterior_from_stats(&RegressionStats::from_data(w, y)?, prior, sigma_u, alpha)
}

pub fn conjugate_alpha_posterior_from_stats(
    stats: &RegressionStats,
    prior: &ConjugatePrior,
    sigma_u: f64,
    alpha: f64,
) -> Result<GaussianDist> {
    check_positive("alpha", alpha)?;
    check_positive("sigma_u", sigma_u)?;
    if prior.dim() != stats.dim() {
        return Err(Error::DimensionMismatch {
            expected: stats.dim(),
            got: prior.dim(),
        });
    }
    let n = stats.n as f64;
    let an = alpha * n;
    let m = &stats.sum_ww / n + &prior.precision_scale / an;
    let chol = linalg::cholesky_well_posed(&m, SINGULAR_PIVOT_TOL)
        .ok_or(Error::Singular("normal-equations matrix"))?;
    let rhs = &prior.precision_scale * &prior.mean / an + &stats.sum_wy / n;
    let mean = chol.solve(&rhs);
    let cov = linalg::symmetrize(&chol.inverse()) * (sigma_u * sigma_u / an);
    GaussianDist::new(mean, cov)
}

/// Joint log-likelihood of the full sample as a function of the parameter.
pub trait LikelihoodEvaluator: Sync {
    fn dim(&self) -> usize;
    fn log_lik(&self, theta: &[f64]) -> f64;
}

/// Adapts a closure into a [`LikelihoodEvaluator`].
pub struct FnLikelihood<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> f64 + Sync> FnLikelihood<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64]) -> f64 + Sync> LikelihoodEvaluator for FnLikelihood<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_lik(&self, theta: &[f64]) -> f64 {
        (self.f)(theta)
    }
}

/// Gaussian linear-model likelihood with presumed noise sd `sigma_u`.
#[derive(Debug, Clone)]
pub struct RegressionLikelihood {
    pub stats: RegressionStats,
    pub sigma_u: f64,
}

impl LikelihoodEvaluator for RegressionLikelihood {
    fn dim(&self) -> usize {
        self.stats.dim()
    }

    fn log_lik(&self, theta: &[f64]) -> f64 {
        self.stats.log_likelihood(self.sigma_u, theta)
    }
}

/// Box `θ̂ ± half_width/√(αn·λ_min(V))` per axis with `nodes` nodes per axis.
pub fn default_grid_box(
    center: &DVector<f64>,
    curvature: &DMatrix<f64>,
    n: usize,
    alpha: f64,
    nodes: usize,
) -> Result<Vec<GridAxis>> {
    let lambda = linalg::min_eigenvalue(curvature);
    if !(lambda > 0.0) {
        return Err(Error::NotPositiveDefinite);
    }
    let half = DEFAULT_BOX_HALF_WIDTH / (alpha * n as f64 * lambda).sqrt();
    center
        .iter()
        .map(|&c| GridAxis::centered(c, half, nodes))
        .collect()
}

/// Tabulated α-posterior with node weights `α·log_lik(θ) + log_prior(θ)`,
/// normalized by the trapezoid rule after log-sum-exp stabilization.
pub fn grid_alpha_posterior<L, P>(
    lik: &L,
    log_prior: P,
    alpha: f64,
    axes: Vec<GridAxis>,
) -> Result<GridDensity>
where
    L: LikelihoodEvaluator + ?Sized,
    P: Fn(&[f64]) -> f64 + Sync + Send,
{
    check_positive("alpha", alpha)?;
    let dim = lik.dim();
    if dim > 2 {
        return Err(Error::UnsupportedDimension {
            dim,
            what: "grid α-posterior",
        });
    }
    if axes.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: axes.len(),
        });
    }
    if axes.iter().any(|a| a.len() < MIN_GRID_NODES) {
        return Err(Error::invalid(
            "grid",
            format!("need at least {MIN_GRID_NODES} nodes per axis"),
        ));
    }
    let lw_fn = |theta: &[f64]| {
        let v = alpha * lik.log_lik(theta) + log_prior(theta);
        if v.is_finite() {
            v
        } else {
            f64::NAN
        }
    };
    let grid = GridDensity::from_log_fn(axes, lw_fn).map_err(|e| match e {
        Error::NonFinite(_) => Error::NonFinite("log-likelihood or log-prior on a grid node"),
        other => other,
    })?;
    if grid.is_boundary(grid.argmax()) {
        return Err(Error::BoxMisplaced);
    }
    Ok(grid)
}

/// Large-sample Gaussian limit `N(θ̂_ML, V⁻¹/(αn))`.
pub fn gaussian_bvm_limit(
    theta_hat_ml: &DVector<f64>,
    curvature: &DMatrix<f64>,
    n: usize,
    alpha: f64,
) -> Result<GaussianDist> {
    check_positive("alpha", alpha)?;
    let vinv = linalg::spd_inverse(curvature)?;
    GaussianDist::new(theta_hat_ml.clone(), vinv / (alpha * n as f64))
}

/// Posterior representations accepted by [`concentration_probability`].
#[derive(Debug, Clone, Copy)]
pub enum Posterior<'a> {
    Gaussian(&'a GaussianDist),
    Grid(&'a GridDensity),
}

/// `P_post(‖√n(θ − θ*)‖ > radius)`.
///
/// One-dimensional Gaussians use exact normal tails; higher-dimensional
/// Gaussians use [`CONCENTRATION_MC_DRAWS`] draws from `rng`; grids use a
/// masked trapezoid sum.
pub fn concentration_probability<R: Rng + ?Sized>(
    post: Posterior<'_>,
    theta_star: &DVector<f64>,
    n: usize,
    radius: f64,
    rng: &mut R,
) -> Result<f64> {
    if !(radius > 0.0) {
        return Err(Error::invalid("radius", "must be positive"));
    }
    let sqrt_n = (n as f64).sqrt();
    match post {
        Posterior::Gaussian(g) => {
            linalg::check_len(theta_star, g.dim())?;
            if radius.is_infinite() {
                return Ok(0.0);
            }
            if g.dim() == 1 {
                let sd = g.marginal_sd(0);
                let m = g.mean()[0];
                let hi = (theta_star[0] + radius / sqrt_n - m) / sd;
                let lo = (theta_star[0] - radius / sqrt_n - m) / sd;
                return Ok(normal_sf(hi) + normal_sf(-lo));
            }
            let hits = (0..CONCENTRATION_MC_DRAWS)
                .filter(|_| ((g.sample(rng) - theta_star) * sqrt_n).norm() > radius)
                .count();
            Ok(hits as f64 / CONCENTRATION_MC_DRAWS as f64)
        }
        Posterior::Grid(grid) => {
            linalg::check_len(theta_star, grid.dim())?;
            let p = grid.expect(|x| {
                let d2: f64 = x.iter().zip(theta_star.iter()).map(|(a, b)| (a - b).powi(2)).sum();
                if (d2.sqrt() * sqrt_n) > radius {
                    1.0
                } else {
                    0.0
                }
            });
            Ok(p.clamp(0.0, 1.0))
        }
    }
}

pub(crate) fn check_positive(name: &'static str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::invalid(name, format!("must be positive and finite, got {v}")));
    }
    Ok(())
}
