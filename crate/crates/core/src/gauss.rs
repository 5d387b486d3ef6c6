//! Multivariate Gaussians, tabulated grid densities and divergences.
//!
//! The squared Hellinger distance uses the standard Bhattacharyya affinity
//! `|Σ₁|^{1/4}|Σ₂|^{1/4} / |Σ̄|^{1/2} · exp(−⅛ δᵀ Σ̄⁻¹ δ)` with
//! `Σ̄ = (Σ₁ + Σ₂)/2`. Some printed versions of this display drop the
//! inverse inside the quadratic form; that variant is not a valid affinity
//! (it is not invariant to rescaling the parameter) and is not used here.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;

use crate::error::{Error, Result};
use crate::exec;
use crate::linalg;
use crate::sampling::standard_normal_vector;

/// Slack below zero tolerated (and clamped) in KL evaluations.
pub const KL_CLAMP_SLACK: f64 = 1e-12;

/// Half-width, in pooled standard deviations, of the TV quadrature box.
pub const TV_QUADRATURE_HALF_WIDTH: f64 = 8.0;

/// Nodes whose density falls below this contribute nothing to grid KL.
pub const GRID_DENSITY_FLOOR: f64 = 1e-300;

/// A multivariate normal `N(mean, cov)` with a validated, cached Cholesky factor.
#[derive(Debug, Clone)]
pub struct GaussianDist {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl GaussianDist {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let p = linalg::check_square(&cov)?;
        linalg::check_len(&mean, p)?;
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("mean"));
        }
        let chol = linalg::spd_cholesky(&cov)?;
        let log_det = linalg::log_det_from_cholesky(&chol);
        Ok(Self {
            mean,
            cov: linalg::symmetrize(&cov),
            chol,
            log_det,
        })
    }

    pub fn univariate(mean: f64, var: f64) -> Result<Self> {
        Self::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, var))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn cholesky(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn precision(&self) -> DMatrix<f64> {
        linalg::symmetrize(&self.chol.inverse())
    }

    pub fn marginal_sd(&self, j: usize) -> f64 {
        self.cov[(j, j)].sqrt()
    }

    /// `‖L⁻¹ x‖²` for the Cholesky factor `L` of the covariance.
    fn mahalanobis_sq(&self, x: &DVector<f64>) -> f64 {
        let z = self
            .chol
            .l_dirty()
            .solve_lower_triangular(x)
            .expect("Cholesky factor has positive diagonal");
        z.norm_squared()
    }

    /// `log φ(x | μ, Σ)`.
    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        linalg::check_len(x, self.dim())?;
        Ok(self.log_density_unchecked(x.as_slice()))
    }

    pub(crate) fn log_density_unchecked(&self, x: &[f64]) -> f64 {
        let p = self.dim() as f64;
        let d = DVector::from_column_slice(x) - &self.mean;
        -0.5 * (p * (2.0 * PI).ln() + self.log_det + self.mahalanobis_sq(&d))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = standard_normal_vector(rng, self.dim());
        &self.mean + self.chol.l_dirty().lower_triangle() * z
    }

    /// Same mean, covariance multiplied by `factor > 0`.
    pub fn scaled_cov(&self, factor: f64) -> Result<Self> {
        Self::new(self.mean.clone(), &self.cov * factor)
    }
}

fn check_same_dim(p: &GaussianDist, q: &GaussianDist) -> Result<()> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: q.dim(),
        });
    }
    Ok(())
}

/// `KL(p ‖ q)` between two Gaussians in closed form.
pub fn kl_gaussian(p: &GaussianDist, q: &GaussianDist) -> Result<f64> {
    check_same_dim(p, q)?;
    let lq = q.chol.l_dirty().lower_triangle();
    let lp = p.chol.l_dirty().lower_triangle();
    // tr(Σq⁻¹ Σp) = ‖Lq⁻¹ Lp‖_F²
    let m = lq
        .solve_lower_triangular(&lp)
        .expect("Cholesky factor has positive diagonal");
    let trace = m.norm_squared();
    let maha = q.mahalanobis_sq(&(&q.mean - &p.mean));
    let kl = 0.5 * (q.log_det - p.log_det + trace + maha - p.dim() as f64);
    debug_assert!(kl > -1e-8, "KL strongly negative: {kl}");
    Ok(if kl < 0.0 { 0.0 } else { kl })
}

/// Determinant part of the Bhattacharyya affinity,
/// `|Σ₁|^{1/4}|Σ₂|^{1/4} / |(Σ₁+Σ₂)/2|^{1/2}`; at most 1 with equality iff
/// the covariances coincide.
pub fn affinity_ratio(cov1: &DMatrix<f64>, cov2: &DMatrix<f64>) -> Result<f64> {
    if cov1.shape() != cov2.shape() {
        return Err(Error::DimensionMismatch {
            expected: cov1.nrows(),
            got: cov2.nrows(),
        });
    }
    let l1 = linalg::spd_log_det(cov1)?;
    let l2 = linalg::spd_log_det(cov2)?;
    let lavg = linalg::spd_log_det(&((cov1 + cov2) * 0.5))?;
    Ok((0.25 * l1 + 0.25 * l2 - 0.5 * lavg).exp())
}

/// Squared Hellinger distance `1 − ∫√(pq)` between two Gaussians.
pub fn hellinger_sq_gaussian(p: &GaussianDist, q: &GaussianDist) -> Result<f64> {
    check_same_dim(p, q)?;
    let avg = (&p.cov + &q.cov) * 0.5;
    let chol = linalg::spd_cholesky(&avg)?;
    let delta = &p.mean - &q.mean;
    let maha = delta.dot(&chol.solve(&delta));
    let log_bc = 0.25 * p.log_det + 0.25 * q.log_det
        - 0.5 * linalg::log_det_from_cholesky(&chol)
        - maha / 8.0;
    Ok((1.0 - log_bc.exp()).clamp(0.0, 1.0))
}

/// A point estimate with its standard error (zero for deterministic rules).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TvMethod {
    /// Tensor trapezoid rule, `budget` nodes per axis; dimension ≤ 2.
    Quadrature,
    /// `½ Ê_p|1 − q(X)/p(X)|` from `budget` draws of `p`.
    MonteCarlo,
}

/// Total variation distance `½∫|p − q|`.
pub fn tv_gaussian<R: Rng + ?Sized>(
    p: &GaussianDist,
    q: &GaussianDist,
    method: TvMethod,
    budget: usize,
    rng: &mut R,
) -> Result<Estimate> {
    check_same_dim(p, q)?;
    if budget < 2 {
        return Err(Error::invalid("budget", "need at least two nodes or draws"));
    }
    match method {
        TvMethod::Quadrature => tv_gaussian_quadrature(p, q, budget),
        TvMethod::MonteCarlo => Ok(tv_gaussian_mc(p, q, budget, rng)),
    }
}

fn tv_gaussian_quadrature(p: &GaussianDist, q: &GaussianDist, nodes: usize) -> Result<Estimate> {
    let dim = p.dim();
    if dim > 2 {
        return Err(Error::UnsupportedDimension {
            dim,
            what: "TV quadrature",
        });
    }
    let axes = (0..dim)
        .map(|j| {
            let k = TV_QUADRATURE_HALF_WIDTH;
            let lo = (p.mean[j] - k * p.marginal_sd(j)).min(q.mean[j] - k * q.marginal_sd(j));
            let hi = (p.mean[j] + k * p.marginal_sd(j)).max(q.mean[j] + k * q.marginal_sd(j));
            GridAxis::new(lo, hi, nodes)
        })
        .collect::<Result<Vec<_>>>()?;
    let gp = GridDensity::from_gaussian(axes.clone(), p)?;
    let gq = GridDensity::from_gaussian(axes, q)?;
    Ok(Estimate {
        value: tv_grid(&gp, &gq)?,
        std_error: 0.0,
    })
}

fn tv_gaussian_mc<R: Rng + ?Sized>(p: &GaussianDist, q: &GaussianDist, draws: usize, rng: &mut R) -> Estimate {
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..draws {
        let x = p.sample(rng);
        let lr = q.log_density_unchecked(x.as_slice()) - p.log_density_unchecked(x.as_slice());
        let v = 0.5 * (1.0 - lr.exp()).abs();
        sum += v;
        sum_sq += v * v;
    }
    let n = draws as f64;
    let mean = sum / n;
    let var = ((sum_sq / n - mean * mean) * n / (n - 1.0)).max(0.0);
    Estimate {
        value: mean,
        std_error: (var / n).sqrt(),
    }
}

/// A uniformly spaced axis `start, start + step, ..` with `len` points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridAxis {
    start: f64,
    step: f64,
    len: usize,
}

impl GridAxis {
    pub fn new(lo: f64, hi: f64, len: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
            return Err(Error::invalid("axis", format!("bad range [{lo}, {hi}]")));
        }
        if len < 3 {
            return Err(Error::invalid("axis", "need at least 3 nodes"));
        }
        Ok(Self {
            start: lo,
            step: (hi - lo) / (len - 1) as f64,
            len,
        })
    }

    /// `len` nodes centered at `center` spanning `center ± half_width`.
    pub fn centered(center: f64, half_width: f64, len: usize) -> Result<Self> {
        Self::new(center - half_width, center + half_width, len)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn lo(&self) -> f64 {
        self.start
    }

    pub fn hi(&self) -> f64 {
        self.point(self.len - 1)
    }

    pub fn point(&self, i: usize) -> f64 {
        self.start + self.step * i as f64
    }

    pub fn points(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len).map(|i| self.point(i))
    }

    fn matches(&self, other: &GridAxis) -> bool {
        let tol = 1e-12 * self.step.abs().max(self.start.abs()).max(1.0);
        self.len == other.len
            && (self.start - other.start).abs() <= tol
            && (self.step - other.step).abs() <= 1e-12 * self.step
    }
}

/// A density tabulated on a rectangular grid and normalized by the
/// (tensor) trapezoid rule. Nodes are stored row-major, last axis fastest.
#[derive(Debug, Clone)]
pub struct GridDensity {
    axes: Vec<GridAxis>,
    log_weights: Vec<f64>,
    normalizer: f64,
}

impl GridDensity {
    /// Builds from unnormalized log weights, normalizing with a stabilized
    /// log-sum-exp trapezoid sum.
    pub fn from_log_weights(axes: Vec<GridAxis>, log_weights: Vec<f64>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::invalid("axes", "need at least one axis"));
        }
        let len: usize = axes.iter().map(|a| a.len()).product();
        if log_weights.len() != len {
            return Err(Error::DimensionMismatch {
                expected: len,
                got: log_weights.len(),
            });
        }
        if log_weights.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
            return Err(Error::NonFinite("log weight"));
        }
        let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::GridUnderflow);
        }
        if log_weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("log weight"));
        }
        let mut grid = Self {
            axes,
            log_weights,
            normalizer: 0.0,
        };
        let sum: f64 = (0..len)
            .map(|i| grid.trapezoid_weight(i) * (grid.log_weights[i] - max).exp())
            .sum();
        if !(sum > 0.0) {
            return Err(Error::GridUnderflow);
        }
        grid.normalizer = max + sum.ln();
        Ok(grid)
    }

    /// Tabulates `log_fn` (an unnormalized log density) on the grid.
    pub fn from_log_fn<F>(axes: Vec<GridAxis>, log_fn: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> f64 + Sync + Send,
    {
        let shape = Shape::new(&axes);
        let len = shape.len();
        let lw = exec::map_indices(len, |i| {
            let theta = shape.point(&axes, i);
            log_fn(&theta)
        });
        Self::from_log_weights(axes, lw)
    }

    pub fn from_gaussian(axes: Vec<GridAxis>, g: &GaussianDist) -> Result<Self> {
        if axes.len() != g.dim() {
            return Err(Error::DimensionMismatch {
                expected: g.dim(),
                got: axes.len(),
            });
        }
        Self::from_log_fn(axes, |x| g.log_density_unchecked(x))
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn axes(&self) -> &[GridAxis] {
        &self.axes
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// Log of the trapezoid integral of the unnormalized weights.
    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    pub fn node(&self, i: usize) -> Vec<f64> {
        Shape::new(&self.axes).point(&self.axes, i)
    }

    pub fn log_density_at(&self, i: usize) -> f64 {
        self.log_weights[i] - self.normalizer
    }

    pub fn density_at(&self, i: usize) -> f64 {
        self.log_density_at(i).exp()
    }

    /// Product of per-axis trapezoid weights at node `i`.
    pub fn trapezoid_weight(&self, i: usize) -> f64 {
        let idx = Shape::new(&self.axes).unravel(i);
        self.axes
            .iter()
            .zip(idx)
            .map(|(a, k)| if k == 0 || k + 1 == a.len() { 0.5 * a.step() } else { a.step() })
            .product()
    }

    /// Trapezoid integral of `f(node) · density(node)`.
    pub fn expect<F: Fn(&[f64]) -> f64>(&self, f: F) -> f64 {
        (0..self.len())
            .map(|i| {
                let d = self.density_at(i);
                if d == 0.0 {
                    0.0
                } else {
                    self.trapezoid_weight(i) * d * f(&self.node(i))
                }
            })
            .sum()
    }

    pub fn total_mass(&self) -> f64 {
        self.expect(|_| 1.0)
    }

    pub fn mean(&self) -> DVector<f64> {
        DVector::from_fn(self.dim(), |j, _| self.expect(|x| x[j]))
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let m = self.mean();
        let p = self.dim();
        DMatrix::from_fn(p, p, |a, b| self.expect(|x| (x[a] - m[a]) * (x[b] - m[b])))
    }

    /// Index of the node with the largest weight.
    pub fn argmax(&self) -> usize {
        crate::optim::argmin(&self.log_weights.iter().map(|w| -w).collect::<Vec<_>>())
            .expect("grid has finite weights")
    }

    /// Whether the node is on the outer boundary of the box.
    pub fn is_boundary(&self, i: usize) -> bool {
        let idx = Shape::new(&self.axes).unravel(i);
        self.axes
            .iter()
            .zip(idx)
            .any(|(a, k)| k == 0 || k + 1 == a.len())
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.axes
            .iter()
            .zip(x)
            .all(|(a, &v)| v >= a.lo() && v <= a.hi())
    }

    /// Normalized log density at an arbitrary point by piecewise-quadratic
    /// (tensor Lagrange, three nodes per axis) interpolation, together with
    /// its gradient and Hessian. Points outside the box are extrapolated from
    /// the boundary cells. The interpolant is exact for log densities that
    /// are quadratic polynomials, i.e. for Gaussians.
    pub fn interp_log_density(&self, x: &[f64]) -> LocalQuadratic {
        debug_assert_eq!(x.len(), self.dim());
        let p = self.dim();
        let mut centers = [0usize; 2];
        let mut basis = [[[0.0f64; 3]; 3]; 2]; // [axis][order][node]
        for (j, (axis, &v)) in self.axes.iter().zip(x).enumerate() {
            let t = (v - axis.lo()) / axis.step();
            let c = (t.round().max(1.0) as usize).min(axis.len() - 2);
            let u = t - c as f64;
            let h = axis.step();
            centers[j] = c;
            basis[j][0] = [0.5 * u * (u - 1.0), 1.0 - u * u, 0.5 * u * (u + 1.0)];
            basis[j][1] = [(u - 0.5) / h, -2.0 * u / h, (u + 0.5) / h];
            basis[j][2] = [1.0 / (h * h), -2.0 / (h * h), 1.0 / (h * h)];
        }
        let mut out = LocalQuadratic::zeros(p);
        if p == 1 {
            for a in 0..3 {
                let f = self.log_weights[centers[0] + a - 1];
                out.value += basis[0][0][a] * f;
                out.grad[0] += basis[0][1][a] * f;
                out.hess[0][0] += basis[0][2][a] * f;
            }
        } else {
            let n1 = self.axes[1].len();
            for a in 0..3 {
                for b in 0..3 {
                    let f = self.log_weights[(centers[0] + a - 1) * n1 + centers[1] + b - 1];
                    out.value += basis[0][0][a] * basis[1][0][b] * f;
                    out.grad[0] += basis[0][1][a] * basis[1][0][b] * f;
                    out.grad[1] += basis[0][0][a] * basis[1][1][b] * f;
                    out.hess[0][0] += basis[0][2][a] * basis[1][0][b] * f;
                    out.hess[1][1] += basis[0][0][a] * basis[1][2][b] * f;
                    out.hess[0][1] += basis[0][1][a] * basis[1][1][b] * f;
                }
            }
            out.hess[1][0] = out.hess[0][1];
        }
        out.value -= self.normalizer;
        out
    }

    fn check_axes(&self, other: &GridDensity) -> Result<()> {
        if self.axes.len() != other.axes.len()
            || self.axes.iter().zip(&other.axes).any(|(a, b)| !a.matches(b))
        {
            return Err(Error::AxisMismatch);
        }
        Ok(())
    }
}

/// Value, gradient and Hessian of a local quadratic model (dimension ≤ 2).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalQuadratic {
    pub value: f64,
    pub grad: [f64; 2],
    pub hess: [[f64; 2]; 2],
}

impl LocalQuadratic {
    fn zeros(_dim: usize) -> Self {
        Self {
            value: 0.0,
            grad: [0.0; 2],
            hess: [[0.0; 2]; 2],
        }
    }
}

/// Row-major index arithmetic for a tensor grid.
struct Shape {
    lens: Vec<usize>,
}

impl Shape {
    fn new(axes: &[GridAxis]) -> Self {
        Self {
            lens: axes.iter().map(|a| a.len()).collect(),
        }
    }

    fn len(&self) -> usize {
        self.lens.iter().product()
    }

    fn unravel(&self, mut i: usize) -> Vec<usize> {
        let mut idx = vec![0; self.lens.len()];
        for (slot, &n) in idx.iter_mut().zip(&self.lens).rev() {
            *slot = i % n;
            i /= n;
        }
        idx
    }

    fn point(&self, axes: &[GridAxis], i: usize) -> Vec<f64> {
        self.unravel(i)
            .into_iter()
            .zip(axes)
            .map(|(k, a)| a.point(k))
            .collect()
    }
}

/// Trapezoid-rule `KL(p ‖ q)` between two densities on identical grids.
pub fn kl_grid(p: &GridDensity, q: &GridDensity) -> Result<f64> {
    p.check_axes(q)?;
    let mut total = 0.0;
    for i in 0..p.len() {
        let lp = p.log_density_at(i);
        let dp = lp.exp();
        if dp < GRID_DENSITY_FLOOR {
            continue;
        }
        total += p.trapezoid_weight(i) * dp * (lp - q.log_density_at(i));
    }
    Ok(total)
}

/// Trapezoid-rule total variation `½∫|p − q|` between two gridded densities.
pub fn tv_grid(p: &GridDensity, q: &GridDensity) -> Result<f64> {
    p.check_axes(q)?;
    let total: f64 = (0..p.len())
        .map(|i| p.trapezoid_weight(i) * (p.density_at(i) - q.density_at(i)).abs())
        .sum();
    Ok(0.5 * total)
}
