//! Omitted-variable Gaussian linear regression.
//!
//! Data are generated from `Y = θ₀ᵀW + γ₀ᵀZ + ε` with `(W, Z)` jointly
//! zero-mean Gaussian, but the analyst regresses `Y` on `W` alone with a
//! presumed noise sd `σ_u`. The misspecified model then concentrates at the
//! pseudo-true value `θ* = θ₀ + cov_WW⁻¹ cov_WZ γ₀`.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::alpha_posterior::{
    check_positive, conjugate_alpha_posterior_from_stats, ConjugatePrior, RegressionStats, SINGULAR_PIVOT_TOL,
};
use crate::error::{Error, Result};
use crate::gauss::{affinity_ratio, hellinger_sq_gaussian, GaussianDist};
use crate::linalg;
use crate::sampling::{derive_seed, rng_from_seed};
use crate::variational::DiagonalGaussian;

/// Data-generating process plus the analyst's presumed noise sd.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionDGP {
    pub theta0: DVector<f64>,
    pub gamma0: DVector<f64>,
    pub sigma_eps: f64,
    pub cov_ww: DMatrix<f64>,
    pub cov_wz: DMatrix<f64>,
    pub cov_zz: DMatrix<f64>,
    pub sigma_u: f64,
}

impl RegressionDGP {
    /// Validates the blocks; `sigma_u = None` selects [`Self::projection_sd`].
    pub fn new(
        theta0: DVector<f64>,
        gamma0: DVector<f64>,
        sigma_eps: f64,
        cov_ww: DMatrix<f64>,
        cov_wz: DMatrix<f64>,
        cov_zz: DMatrix<f64>,
        sigma_u: Option<f64>,
    ) -> Result<Self> {
        let p = theta0.len();
        let d = gamma0.len();
        if p == 0 || d == 0 {
            return Err(Error::invalid("dimensions", "need p ≥ 1 and d ≥ 1"));
        }
        if cov_ww.shape() != (p, p) || cov_wz.shape() != (p, d) || cov_zz.shape() != (d, d) {
            return Err(Error::invalid(
                "covariance",
                format!("expected blocks {p}×{p}, {p}×{d}, {d}×{d}"),
            ));
        }
        if !(sigma_eps >= 0.0 && sigma_eps.is_finite()) {
            return Err(Error::invalid("sigma_eps", "must be finite and non-negative"));
        }
        let mut dgp = Self {
            theta0,
            gamma0,
            sigma_eps,
            cov_ww,
            cov_wz,
            cov_zz,
            sigma_u: 1.0,
        };
        linalg::spd_cholesky(&dgp.joint_cov())?;
        dgp.sigma_u = match sigma_u {
            Some(s) => {
                check_positive("sigma_u", s)?;
                s
            }
            None => dgp.projection_sd(),
        };
        check_positive("sigma_u", dgp.sigma_u)?;
        Ok(dgp)
    }

    /// The scalar example: `θ₀ = γ₀ = 1`, `σ_ε = 1`, unit variances and
    /// `cov_WZ = 0.5`.
    pub fn example() -> Self {
        Self::new(
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 1.0),
            1.0,
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 1.0),
            None,
        )
        .expect("example parameters are valid")
    }

    pub fn p(&self) -> usize {
        self.theta0.len()
    }

    pub fn d(&self) -> usize {
        self.gamma0.len()
    }

    /// Covariance of the stacked regressor `(W, Z)`.
    pub fn joint_cov(&self) -> DMatrix<f64> {
        let (p, d) = (self.p(), self.d());
        let mut m = DMatrix::zeros(p + d, p + d);
        m.view_mut((0, 0), (p, p)).copy_from(&self.cov_ww);
        m.view_mut((0, p), (p, d)).copy_from(&self.cov_wz);
        m.view_mut((p, 0), (d, p)).copy_from(&self.cov_wz.transpose());
        m.view_mut((p, p), (d, d)).copy_from(&self.cov_zz);
        m
    }

    /// Residual sd of the population projection of `Y` on `W`:
    /// `√(σ_ε² + γ₀ᵀ(cov_ZZ − cov_WZᵀ cov_WW⁻¹ cov_WZ)γ₀)`.
    pub fn projection_sd(&self) -> f64 {
        let ww_inv = linalg::spd_inverse(&self.cov_ww).expect("validated SPD");
        let resid = &self.cov_zz - self.cov_wz.transpose() * ww_inv * &self.cov_wz;
        (self.sigma_eps.powi(2) + linalg::quad_form(&resid, &self.gamma0)).sqrt()
    }
}

/// A simulated (or imported) sample. `seed` is `None` for imported data.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionDataset {
    pub y: DVector<f64>,
    pub w: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub seed: Option<u64>,
}

impl RegressionDataset {
    pub fn new(y: DVector<f64>, w: DMatrix<f64>, z: DMatrix<f64>, seed: Option<u64>) -> Result<Self> {
        for rows in [w.nrows(), z.nrows()] {
            if rows != y.len() {
                return Err(Error::DimensionMismatch {
                    expected: y.len(),
                    got: rows,
                });
            }
        }
        Ok(Self { y, w, z, seed })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.w.ncols()
    }

    pub fn d(&self) -> usize {
        self.z.ncols()
    }

    /// Sufficient statistics of the working regression of `Y` on `W`.
    pub fn stats(&self) -> RegressionStats {
        RegressionStats::from_data(&self.w, &self.y).expect("row counts checked at construction")
    }

    /// The full design `[W Z]`.
    pub fn full_design(&self) -> DMatrix<f64> {
        let (n, p, d) = (self.n(), self.p(), self.d());
        let mut x = DMatrix::zeros(n, p + d);
        x.view_mut((0, 0), (n, p)).copy_from(&self.w);
        x.view_mut((0, p), (n, d)).copy_from(&self.z);
        x
    }

    /// Writes `y,w1..wp,z1..zd` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["y".to_string()];
        header.extend((1..=self.p()).map(|j| format!("w{j}")));
        header.extend((1..=self.d()).map(|j| format!("z{j}")));
        wtr.write_record(&header)?;
        for i in 0..self.n() {
            let mut row = vec![self.y[i].to_string()];
            row.extend(self.w.row(i).iter().map(f64::to_string));
            row.extend(self.z.row(i).iter().map(f64::to_string));
            wtr.write_record(&row)?;
        }
        wtr.flush().map_err(|e| Error::Csv(e.to_string()))
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Reads the format produced by [`Self::write_csv`].
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let header = rdr.headers()?.clone();
        let names: Vec<&str> = header.iter().collect();
        let p = names.iter().filter(|h| h.starts_with('w')).count();
        let d = names.iter().filter(|h| h.starts_with('z')).count();
        let mut expected = vec!["y".to_string()];
        expected.extend((1..=p).map(|j| format!("w{j}")));
        expected.extend((1..=d).map(|j| format!("z{j}")));
        if names != expected.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Csv(format!("unexpected header {names:?}")));
        }
        let mut values = Vec::new();
        for record in rdr.records() {
            let record = record?;
            for field in record.iter() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Csv(format!("not a number: {field:?}")))?;
                values.push(v);
            }
        }
        let cols = 1 + p + d;
        let n = values.len() / cols;
        let table = DMatrix::from_row_slice(n, cols, &values);
        Self::new(
            table.column(0).into_owned(),
            table.columns(1, p).into_owned(),
            table.columns(1 + p, d).into_owned(),
            None,
        )
    }
}

/// Draws `n` observations; bit-reproducible given `seed`.
pub fn simulate(dgp: &RegressionDGP, n: usize, seed: u64) -> Result<RegressionDataset> {
    let (p, d) = (dgp.p(), dgp.d());
    if n < p + d {
        return Err(Error::invalid("n", format!("need n ≥ p + d = {}, got {n}", p + d)));
    }
    let chol = linalg::spd_cholesky(&dgp.joint_cov())?;
    let l = chol.l();
    let mut rng = rng_from_seed(seed);
    let mut w = DMatrix::zeros(n, p);
    let mut z = DMatrix::zeros(n, d);
    let mut y = DVector::zeros(n);
    let mut e = DVector::zeros(p + d);
    for i in 0..n {
        for v in e.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let x = &l * &e;
        let noise: f64 = StandardNormal.sample(&mut rng);
        let wi = x.rows(0, p);
        let zi = x.rows(p, d);
        y[i] = dgp.theta0.dot(&wi) + dgp.gamma0.dot(&zi) + dgp.sigma_eps * noise;
        w.row_mut(i).copy_from(&wi.transpose());
        z.row_mut(i).copy_from(&zi.transpose());
    }
    RegressionDataset::new(y, w, z, Some(seed))
}

/// Least squares `(ΣWWᵀ/n)⁻¹ ΣWY/n`.
pub fn ols(w: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    ols_from_stats(&RegressionStats::from_data(w, y)?)
}

pub fn ols_from_stats(stats: &RegressionStats) -> Result<DVector<f64>> {
    let n = stats.n as f64;
    let chol = linalg::cholesky_well_posed(&(&stats.sum_ww / n), SINGULAR_PIVOT_TOL)
        .ok_or(Error::Singular("design is rank deficient"))?;
    Ok(chol.solve(&(&stats.sum_wy / n)))
}

/// `θ* = θ₀ + cov_WW⁻¹ cov_WZ γ₀`.
pub fn pseudo_true(dgp: &RegressionDGP) -> DVector<f64> {
    let chol = linalg::spd_cholesky(&dgp.cov_ww).expect("validated SPD");
    &dgp.theta0 + chol.solve(&(&dgp.cov_wz * &dgp.gamma0))
}

/// `V_{θ*} = cov_WW / σ_u²`.
pub fn curvature(dgp: &RegressionDGP) -> DMatrix<f64> {
    &dgp.cov_ww / dgp.sigma_u.powi(2)
}

/// θ-block of `σ_ε² E[XXᵀ]⁻¹` with `X = (W, Z)`: the large-sample
/// covariance scale `Ω` of the correct-model posterior.
pub fn population_omega(dgp: &RegressionDGP) -> Result<DMatrix<f64>> {
    if dgp.sigma_eps == 0.0 {
        return Err(Error::invalid("sigma_eps", "Ω is degenerate without noise"));
    }
    let zz_inv = linalg::spd_inverse(&dgp.cov_zz)?;
    let schur = &dgp.cov_ww - &dgp.cov_wz * zz_inv * dgp.cov_wz.transpose();
    Ok(linalg::spd_inverse(&linalg::symmetrize(&schur))? * dgp.sigma_eps.powi(2))
}

/// `Q_n = ΣWWᵀ/(nσ_u²) − V` and `Δ_n = √n(θ̂_ML − θ*)`.
fn lan_ingredients(stats: &RegressionStats, dgp: &RegressionDGP) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if stats.dim() != dgp.p() {
        return Err(Error::DimensionMismatch {
            expected: dgp.p(),
            got: stats.dim(),
        });
    }
    let n = stats.n as f64;
    let q = &stats.sum_ww / (n * dgp.sigma_u.powi(2)) - curvature(dgp);
    let delta = (ols_from_stats(stats)? - pseudo_true(dgp)) * n.sqrt();
    Ok((q, delta))
}

/// LAN remainder `R_n(h) = hᵀQ_nΔ_n − ½hᵀQ_n h`.
pub fn lan_residual(ds: &RegressionDataset, dgp: &RegressionDGP, h: &DVector<f64>) -> Result<f64> {
    let (q, delta) = lan_ingredients(&ds.stats(), dgp)?;
    linalg::check_len(h, dgp.p())?;
    Ok(h.dot(&(&q * delta)) - 0.5 * linalg::quad_form(&q, h))
}

/// The same remainder from its definition:
/// `log f(θ* + h/√n) − log f(θ*) − hᵀVΔ_n + ½hᵀVh`.
pub fn lan_residual_direct(ds: &RegressionDataset, dgp: &RegressionDGP, h: &DVector<f64>) -> Result<f64> {
    let stats = ds.stats();
    linalg::check_len(h, dgp.p())?;
    let n = stats.n as f64;
    let star = pseudo_true(dgp);
    let moved = &star + h / n.sqrt();
    let v = curvature(dgp);
    let delta = (ols_from_stats(&stats)? - &star) * n.sqrt();
    let ratio = stats.log_likelihood(dgp.sigma_u, moved.as_slice()) - stats.log_likelihood(dgp.sigma_u, star.as_slice());
    Ok(ratio - h.dot(&(&v * delta)) + 0.5 * linalg::quad_form(&v, h))
}

/// `sup |R_n(h)|` over a tensor grid of `points` values per axis on
/// `[−half_width, half_width]^p`.
pub fn lan_residual_sup(ds: &RegressionDataset, dgp: &RegressionDGP, half_width: f64, points: usize) -> Result<f64> {
    if points < 2 {
        return Err(Error::invalid("points", "need at least 2 per axis"));
    }
    let (q, delta) = lan_ingredients(&ds.stats(), dgp)?;
    let p = dgp.p();
    let axis: Vec<f64> = (0..points)
        .map(|i| -half_width + 2.0 * half_width * i as f64 / (points - 1) as f64)
        .collect();
    let total = points.pow(p as u32);
    let qd = &q * &delta;
    let mut h = DVector::zeros(p);
    let mut sup = 0.0f64;
    for flat in 0..total {
        let mut rem = flat;
        for j in 0..p {
            h[j] = axis[rem % points];
            rem /= points;
        }
        sup = sup.max((h.dot(&qd) - 0.5 * linalg::quad_form(&q, &h)).abs());
    }
    Ok(sup)
}

/// The two defects controlling the variational objective around `θ*` for
/// `q = N(μ_n, Σ_n)`: the prior term and the LAN-remainder term.
pub fn assumption2_terms(
    mu_n: &DVector<f64>,
    sigma_n: &DMatrix<f64>,
    dgp: &RegressionDGP,
    prior: &ConjugatePrior,
    ds: &RegressionDataset,
) -> Result<(f64, f64)> {
    let p = dgp.p();
    linalg::check_len(mu_n, p)?;
    if sigma_n.shape() != (p, p) || prior.dim() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: sigma_n.nrows().max(prior.dim()),
        });
    }
    let stats = ds.stats();
    let n = stats.n as f64;
    let star = pseudo_true(dgp);
    let mu_bar = (mu_n - &star) * n.sqrt();
    let n_sigma = sigma_n * n;
    let a = &prior.precision_scale / dgp.sigma_u.powi(2);
    let prior_term = -linalg::quad_form(&a, &mu_bar) / (2.0 * n) - linalg::trace_of_product(&n_sigma, &a) / (2.0 * n)
        + mu_bar.dot(&(&a * (&prior.mean - &star))) / n.sqrt();
    let (q, delta) = lan_ingredients(&stats, dgp)?;
    let residual_term =
        mu_bar.dot(&(&q * delta)) - 0.5 * linalg::quad_form(&q, &mu_bar) - 0.5 * linalg::trace_of_product(&q, &n_sigma);
    Ok((prior_term, residual_term))
}

/// Mean-field α-posterior of the conjugate model: the conjugate mean with
/// variances `σ_u²/(αn) · 1/diag(ΣWWᵀ/n + Σ_π/(αn))`.
pub fn variational_conjugate_cov(
    ds: &RegressionDataset,
    prior: &ConjugatePrior,
    sigma_u: f64,
    alpha: f64,
) -> Result<DiagonalGaussian> {
    let stats = ds.stats();
    let post = conjugate_alpha_posterior_from_stats(&stats, prior, sigma_u, alpha)?;
    let an = alpha * stats.n as f64;
    let m = &stats.sum_ww / stats.n as f64 + &prior.precision_scale / an;
    let var = m.diagonal().map(|v| sigma_u * sigma_u / (an * v));
    DiagonalGaussian::new(post.mean().clone(), var)
}

/// Gaussian prior on the full coefficient vector `(θ, γ)` with absolute
/// precision (zero precision = flat).
#[derive(Debug, Clone, PartialEq)]
pub struct FullPrior {
    pub mean: DVector<f64>,
    pub precision: DMatrix<f64>,
}

impl FullPrior {
    pub fn new(mean: DVector<f64>, precision: DMatrix<f64>) -> Result<Self> {
        let k = linalg::check_square(&precision)?;
        linalg::check_len(&mean, k)?;
        linalg::check_symmetric(&precision)?;
        if linalg::min_eigenvalue(&precision) < -1e-12 {
            return Err(Error::invalid("precision", "must be positive semi-definite"));
        }
        Ok(Self { mean, precision })
    }

    /// `N(0, I/precision)` on `dim` coefficients.
    pub fn isotropic(dim: usize, precision: f64) -> Result<Self> {
        if !(precision >= 0.0 && precision.is_finite()) {
            return Err(Error::invalid("precision", "must be finite and non-negative"));
        }
        Self::new(DVector::zeros(dim), DMatrix::identity(dim, dim) * precision)
    }
}

/// θ-marginal of the correct-model posterior and `Ω̂ = n·cov`.
#[derive(Debug, Clone)]
pub struct TruePosterior {
    pub theta: GaussianDist,
    pub omega_hat: DMatrix<f64>,
}

/// Conjugate update of `(θ, γ)` under the full model with known noise sd
/// `sigma_eps`; returns the θ-block.
pub fn true_posterior_theta(ds: &RegressionDataset, prior: &FullPrior, sigma_eps: f64) -> Result<TruePosterior> {
    check_positive("sigma_eps", sigma_eps)?;
    let (p, d) = (ds.p(), ds.d());
    linalg::check_len(&prior.mean, p + d)?;
    let x = ds.full_design();
    let s2 = sigma_eps * sigma_eps;
    let prec = x.tr_mul(&x) / s2 + &prior.precision;
    // Scale by the largest diagonal entry so the rank check is unit-free.
    let scale = prec.diagonal().max();
    let chol = linalg::cholesky_well_posed(&(&prec / scale), SINGULAR_PIVOT_TOL)
        .ok_or(Error::Singular("full design with prior precision"))?;
    let mean = chol.solve(&((x.tr_mul(&ds.y) / s2 + &prior.precision * &prior.mean) / scale));
    let cov = linalg::symmetrize(&(chol.inverse() / scale));
    let cov_theta = cov.view((0, 0), (p, p)).into_owned();
    let theta = GaussianDist::new(mean.rows(0, p).into_owned(), cov_theta.clone())?;
    Ok(TruePosterior {
        theta,
        omega_hat: cov_theta * ds.n() as f64,
    })
}

/// Heteroskedasticity-robust sandwich covariance of the working-model OLS
/// estimator, `S⁻¹ (Σ eᵢ² WᵢWᵢᵀ/n) S⁻¹ / n` with `S = ΣWWᵀ/n`.
pub fn sandwich_covariance(ds: &RegressionDataset) -> Result<DMatrix<f64>> {
    let stats = ds.stats();
    let n = stats.n as f64;
    let beta = ols_from_stats(&stats)?;
    let resid = &ds.y - &ds.w * &beta;
    let mut meat = DMatrix::zeros(ds.p(), ds.p());
    for i in 0..ds.n() {
        let wi = ds.w.row(i).transpose();
        meat += &wi * wi.transpose() * resid[i].powi(2);
    }
    let s_inv = linalg::spd_inverse(&(&stats.sum_ww / n))?;
    Ok(linalg::symmetrize(&(&s_inv * (meat / n) * &s_inv / n)))
}

/// Markov bound `(n/r_n²)(‖μ − θ*‖² + tr Σ)` on `P(‖√n(θ − θ*)‖ > r_n)`.
pub fn concentration_markov_bound(
    post_mean: &DVector<f64>,
    post_cov: &DMatrix<f64>,
    theta_star: &DVector<f64>,
    r_n: f64,
    n: usize,
) -> Result<f64> {
    check_positive("r_n", r_n)?;
    linalg::check_len(theta_star, post_mean.len())?;
    Ok(n as f64 / (r_n * r_n) * ((post_mean - theta_star).norm_squared() + post_cov.trace()))
}

/// How the tempering exponent scales with the sample size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaSchedule {
    /// `α_n = α`.
    Constant(f64),
    /// `α_n = α₀/n`.
    InverseN(f64),
}

impl AlphaSchedule {
    pub fn at(&self, n: usize) -> f64 {
        match *self {
            AlphaSchedule::Constant(a) => a,
            AlphaSchedule::InverseN(a0) => a0 / n as f64,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            AlphaSchedule::Constant(_) => "constant",
            AlphaSchedule::InverseN(_) => "inverse-n",
        }
    }

    fn base(&self) -> f64 {
        match *self {
            AlphaSchedule::Constant(a) | AlphaSchedule::InverseN(a) => a,
        }
    }
}

/// One point of [`failure_case_hellinger`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FailurePoint {
    pub n: usize,
    pub alpha_n: f64,
    pub hellinger_sq: f64,
    /// Determinant ratio `|Σ₁|^{1/4}|Σ₂|^{1/4} / |(Σ₁+Σ₂)/2|^{1/2}`.
    pub affinity: f64,
}

/// Squared Hellinger distance between the conjugate α_n-posterior and its
/// nominal limit `N(θ̂_ML, V⁻¹/(α_n n))` along `n_grid`, one dataset per `n`
/// (seeded by `derive_seed(seed, [n])`).
pub fn failure_case_hellinger(
    dgp: &RegressionDGP,
    prior: &ConjugatePrior,
    schedule: AlphaSchedule,
    n_grid: &[usize],
    seed: u64,
) -> Result<Vec<FailurePoint>> {
    check_positive("alpha0", schedule.base())?;
    let v = curvature(dgp);
    n_grid
        .iter()
        .map(|&n| {
            let ds = simulate(dgp, n, derive_seed(seed, &[n as u64]))?;
            failure_point(&ds, dgp, &v, prior, schedule)
        })
        .collect()
}

/// [`failure_case_hellinger`] for a single given dataset.
pub fn failure_point(
    ds: &RegressionDataset,
    dgp: &RegressionDGP,
    v: &DMatrix<f64>,
    prior: &ConjugatePrior,
    schedule: AlphaSchedule,
) -> Result<FailurePoint> {
    let n = ds.n();
    let alpha_n = schedule.at(n);
    let stats = ds.stats();
    let post = conjugate_alpha_posterior_from_stats(&stats, prior, dgp.sigma_u, alpha_n)?;
    let limit = crate::alpha_posterior::gaussian_bvm_limit(&ols_from_stats(&stats)?, v, n, alpha_n)?;
    Ok(FailurePoint {
        n,
        alpha_n,
        hellinger_sq: hellinger_sq_gaussian(&post, &limit)?,
        affinity: affinity_ratio(post.cov(), limit.cov())?,
    })
}
