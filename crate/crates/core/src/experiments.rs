//! Replication studies on the regression example.
//!
//! Every study enumerates `(n, rep)` jobs, seeds each dataset with
//! `derive_seed(seed, [n, rep])`, runs the jobs through [`exec`], and
//! returns typed rows sorted by `(n, rep, alpha)`. Rows know their CSV
//! column schema through [`CsvRow`].

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::alpha_posterior::{
    concentration_probability, conjugate_alpha_posterior_from_stats, default_grid_box, gaussian_bvm_limit,
    grid_alpha_posterior, ConjugatePrior, Posterior, RegressionLikelihood, RegressionStats,
};
use crate::error::{Error, Result};
use crate::exec;
use crate::gauss::{kl_gaussian, kl_grid, tv_grid, GridDensity};
use crate::regression::{
    assumption2_terms, curvature, failure_point, lan_residual_sup, ols_from_stats, population_omega, pseudo_true,
    simulate, true_posterior_theta, variational_conjugate_cov, AlphaSchedule, FullPrior, RegressionDGP,
    RegressionDataset,
};
use crate::robustness::{
    alpha_grid, exact_expected_kl, limit_alpha_star, limit_alpha_tilde, optimal_alpha, optimal_alpha_tilde, r_star,
    FiniteSampleInputs, MisspecScenario, RobustnessCurve,
};
use crate::sampling::{derive_seed, rng_from_seed};
use crate::variational::{gmf_project_numeric, moment_matched, variational_bvm_limit};

/// Half-width of the local-parameter box for the LAN remainder supremum.
pub const LAN_HALF_WIDTH: f64 = 3.0;

/// Points per axis for the LAN remainder supremum.
pub const LAN_POINTS: usize = 13;

/// Knobs shared by all studies.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub replications: usize,
    pub n_grid: Vec<usize>,
    pub alphas: Vec<f64>,
    /// Dense α-grid for `robustness-curve`.
    pub curve_alphas: Vec<f64>,
    /// `ε`; each study uses `ε_n = ε/n`.
    pub eps: f64,
    /// Nodes per axis for tabulated posteriors.
    pub grid_nodes: usize,
    pub dgp: RegressionDGP,
    /// Conjugate prior of the working model.
    pub prior: ConjugatePrior,
    /// Scale `b` of the independent Laplace(0, b) prior used by the grid studies.
    pub laplace_scale: f64,
    /// Gaussian prior on `(θ, γ)` for the correct-model posterior.
    pub full_prior: FullPrior,
    /// `α₀` of the `α_n = α₀/n` schedule in `failure-case`.
    pub failure_alpha0: f64,
}

impl Default for Settings {
    fn default() -> Self {
        let dgp = RegressionDGP::example();
        let (p, d) = (dgp.p(), dgp.d());
        Self {
            seed: 0,
            replications: 200,
            n_grid: vec![50, 200, 1000, 5000, 10_000],
            alphas: vec![0.25, 0.5, 0.75, 1.0],
            curve_alphas: alpha_grid(0.01, 2.0, 200),
            eps: 1.0,
            grid_nodes: 401,
            prior: ConjugatePrior::new(DVector::zeros(p), DMatrix::identity(p, p)).expect("identity is PSD"),
            full_prior: FullPrior::isotropic(p + d, 1.0).expect("valid precision"),
            dgp,
            laplace_scale: 1.0,
            failure_alpha0: 1.0,
        }
    }
}

impl Settings {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::invalid("replications", "must be at least 1"));
        }
        if self.n_grid.is_empty() {
            return Err(Error::invalid("n_grid", "must not be empty"));
        }
        let min_n = self.dgp.p() + self.dgp.d();
        if let Some(n) = self.n_grid.iter().find(|&&n| n < min_n) {
            return Err(Error::invalid("n_grid", format!("n = {n} is below p + d = {min_n}")));
        }
        for (name, list) in [("alphas", &self.alphas), ("curve_alphas", &self.curve_alphas)] {
            if list.is_empty() || list.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
                return Err(Error::invalid(name, "need a non-empty list of positive values"));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::invalid("eps", "must be positive"));
        }
        if !(self.laplace_scale > 0.0 && self.laplace_scale.is_finite()) {
            return Err(Error::invalid("laplace_scale", "must be positive"));
        }
        if !(self.failure_alpha0 > 0.0 && self.failure_alpha0.is_finite()) {
            return Err(Error::invalid("failure_alpha0", "must be positive"));
        }
        if self.prior.dim() != self.dgp.p() {
            return Err(Error::invalid("prior", "dimension must match theta0"));
        }
        if self.full_prior.mean.len() != self.dgp.p() + self.dgp.d() {
            return Err(Error::invalid("full_prior", "dimension must match (theta0, gamma0)"));
        }
        Ok(())
    }

    fn jobs(&self) -> Vec<(usize, usize)> {
        self.n_grid
            .iter()
            .flat_map(|&n| (0..self.replications).map(move |r| (n, r)))
            .collect()
    }

    fn dataset(&self, n: usize, rep: usize) -> Result<RegressionDataset> {
        simulate(&self.dgp, n, derive_seed(self.seed, &[n as u64, rep as u64]))
    }

    fn eps_n(&self, n: usize) -> f64 {
        (self.eps / n as f64).min(1.0)
    }

    fn laplace_log_prior(&self) -> impl Fn(&[f64]) -> f64 + Sync + Send {
        let b = self.laplace_scale;
        move |x: &[f64]| x.iter().map(|t| -t.abs() / b - (2.0 * b).ln()).sum()
    }
}

/// A row with a fixed CSV column schema.
pub trait CsvRow {
    const COLUMNS: &'static [&'static str];
    fn cells(&self) -> Vec<String>;
    fn sort_key(&self) -> (usize, usize, f64);
}

/// Sorts rows by `(n, rep, alpha)` and writes them with a header line.
pub fn write_rows<R: CsvRow, W: Write>(rows: &mut [R], out: W) -> Result<()> {
    rows.sort_by(|a, b| {
        let (ka, kb) = (a.sort_key(), b.sort_key());
        ka.0.cmp(&kb.0).then(ka.1.cmp(&kb.1)).then(ka.2.total_cmp(&kb.2))
    });
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(R::COLUMNS)?;
    for row in rows.iter() {
        wtr.write_record(row.cells())?;
    }
    wtr.flush().map_err(|e| Error::Csv(e.to_string()))
}

fn fmt(v: f64) -> String {
    v.to_string()
}

/// Median of finite values; `NaN` for an empty input.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Upper `q`-quantile by the nearest-rank rule.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

fn run_jobs<T, F>(settings: &Settings, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, usize) -> Result<Vec<T>> + Sync + Send,
{
    settings.validate()?;
    let jobs = settings.jobs();
    let nested = exec::try_map_indices(jobs.len(), |i| f(jobs[i].0, jobs[i].1))?;
    Ok(nested.into_iter().flatten().collect())
}

fn grid_posterior(settings: &Settings, stats: &RegressionStats, theta_hat: &DVector<f64>, alpha: f64) -> Result<GridDensity> {
    let v = curvature(&settings.dgp);
    let axes = default_grid_box(theta_hat, &v, stats.n, alpha, settings.grid_nodes)?;
    let lik = RegressionLikelihood {
        stats: stats.clone(),
        sigma_u: settings.dgp.sigma_u,
    };
    grid_alpha_posterior(&lik, settings.laplace_log_prior(), alpha, axes)
}

/// `n,rep,alpha,tv,kl`: tabulated Laplace-prior α-posterior against
/// `N(θ̂_ML, V⁻¹/(αn))` discretized on the same grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BvmRow {
    pub n: usize,
    pub rep: usize,
    pub alpha: f64,
    pub tv: f64,
    pub kl: f64,
}

impl CsvRow for BvmRow {
    const COLUMNS: &'static [&'static str] = &["n", "rep", "alpha", "tv", "kl"];
    fn cells(&self) -> Vec<String> {
        vec![self.n.to_string(), self.rep.to_string(), fmt(self.alpha), fmt(self.tv), fmt(self.kl)]
    }
    fn sort_key(&self) -> (usize, usize, f64) {
        (self.n, self.rep, self.alpha)
    }
}

pub fn bvm_convergence(settings: &Settings) -> Result<Vec<BvmRow>> {
    let v = curvature(&settings.dgp);
    run_jobs(settings, |n, rep| {
        let stats = settings.dataset(n, rep)?.stats();
        let theta_hat = ols_from_stats(&stats)?;
        settings
            .alphas
            .iter()
            .map(|&alpha| {
                let post = grid_posterior(settings, &stats, &theta_hat, alpha)?;
                let limit = gaussian_bvm_limit(&theta_hat, &v, n, alpha)?;
                let limit = GridDensity::from_gaussian(post.axes().to_vec(), &limit)?;
                Ok(BvmRow {
                    n,
                    rep,
                    alpha,
                    tv: tv_grid(&post, &limit)?,
                    kl: kl_grid(&post, &limit)?,
                })
            })
            .collect()
    })
}

/// `n,rep,alpha,kl,tv_bound`: numeric mean-field projection of the tabulated
/// α-posterior against `N(θ̂_ML, diag(V)⁻¹/(αn))`; `tv_bound = √(kl/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VbvmRow {
    pub n: usize,
    pub rep: usize,
    pub alpha: f64,
    pub kl: f64,
    pub tv_bound: f64,
}

impl CsvRow for VbvmRow {
    const COLUMNS: &'static [&'static str] = &["n", "rep", "alpha", "kl", "tv_bound"];
    fn cells(&self) -> Vec<String> {
        vec![self.n.to_string(), self.rep.to_string(), fmt(self.alpha), fmt(self.kl), fmt(self.tv_bound)]
    }
    fn sort_key(&self) -> (usize, usize, f64) {
        (self.n, self.rep, self.alpha)
    }
}

pub fn vbvm_convergence(settings: &Settings) -> Result<Vec<VbvmRow>> {
    let v = curvature(&settings.dgp);
    run_jobs(settings, |n, rep| {
        let stats = settings.dataset(n, rep)?.stats();
        let theta_hat = ols_from_stats(&stats)?;
        settings
            .alphas
            .iter()
            .map(|&alpha| {
                let post = grid_posterior(settings, &stats, &theta_hat, alpha)?;
                let q = gmf_project_numeric(&post, &moment_matched(&post)?)?;
                let limit = variational_bvm_limit(&theta_hat, &v, n, alpha)?;
                let kl = kl_gaussian(&q.to_gaussian(), &limit.to_gaussian())?;
                Ok(VbvmRow {
                    n,
                    rep,
                    alpha,
                    kl,
                    tv_bound: (kl / 2.0).sqrt(),
                })
            })
            .collect()
    })
}

/// Population scenario of the regression example.
pub fn scenario(settings: &Settings) -> Result<MisspecScenario> {
    let dgp = &settings.dgp;
    MisspecScenario::new(
        dgp.theta0.clone(),
        pseudo_true(dgp),
        curvature(dgp),
        population_omega(dgp)?,
        settings.eps,
    )
}

/// Working-model and correct-model estimators for one dataset.
fn finite_inputs(settings: &Settings, ds: &RegressionDataset) -> Result<FiniteSampleInputs> {
    let p = ds.p();
    let theta_f = ols_from_stats(&ds.stats())?;
    let full = crate::regression::ols(&ds.full_design(), &ds.y)?;
    FiniteSampleInputs::new(theta_f, full.rows(0, p).into_owned(), ds.n(), settings.eps_n(ds.n()))
}

/// Exact criterion `α ↦ ε_n KL(true ‖ π_α) + (1−ε_n) KL(π_1 ‖ π_α)`.
struct ExactCriterion {
    stats: RegressionStats,
    truth: crate::gauss::GaussianDist,
    regular: crate::gauss::GaussianDist,
    prior: ConjugatePrior,
    sigma_u: f64,
    eps_n: f64,
}

impl ExactCriterion {
    fn new(settings: &Settings, ds: &RegressionDataset) -> Result<Self> {
        let stats = ds.stats();
        let truth = true_posterior_theta(ds, &settings.full_prior, settings.dgp.sigma_eps)?.theta;
        let regular = conjugate_alpha_posterior_from_stats(&stats, &settings.prior, settings.dgp.sigma_u, 1.0)?;
        Ok(Self {
            stats,
            truth,
            regular,
            prior: settings.prior.clone(),
            sigma_u: settings.dgp.sigma_u,
            eps_n: settings.eps_n(ds.n()),
        })
    }

    fn eval(&self, alpha: f64) -> Result<f64> {
        let post = conjugate_alpha_posterior_from_stats(&self.stats, &self.prior, self.sigma_u, alpha)?;
        exact_expected_kl(&self.truth, &post, &self.regular, self.eps_n)
    }
}

/// `alpha,r_star,r_tilde_star,r_exact` on `curve_alphas`, for one dataset at
/// the largest `n` of the grid (replication 0).
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub alpha: f64,
    pub r_star: f64,
    pub r_tilde_star: f64,
    pub r_exact: f64,
}

impl CsvRow for CurveRow {
    const COLUMNS: &'static [&'static str] = &["alpha", "r_star", "r_tilde_star", "r_exact"];
    fn cells(&self) -> Vec<String> {
        vec![fmt(self.alpha), fmt(self.r_star), fmt(self.r_tilde_star), fmt(self.r_exact)]
    }
    fn sort_key(&self) -> (usize, usize, f64) {
        (0, 0, self.alpha)
    }
}

pub fn robustness_curve(settings: &Settings) -> Result<Vec<CurveRow>> {
    settings.validate()?;
    let n = *settings.n_grid.iter().max().expect("validated non-empty");
    let ds = settings.dataset(n, 0)?;
    let s = scenario(settings)?;
    let f = finite_inputs(settings, &ds)?;
    let exact = ExactCriterion::new(settings, &ds)?;
    let mut alphas = settings.curve_alphas.clone();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    let curve = RobustnessCurve::evaluate(&alphas, &s, &f, Some(|a| exact.eval(a)))?;
    let exact_vals = curve.r_exact.as_ref().expect("exact criterion requested");
    Ok((0..curve.alphas.len())
        .map(|i| CurveRow {
            alpha: curve.alphas[i],
            r_star: curve.r_star[i],
            r_tilde_star: curve.r_tilde_star[i],
            r_exact: exact_vals[i],
        })
        .collect())
}

/// `n,rep,alpha_star_n,alpha_tilde_star_n,alpha_star,alpha_tilde_star`:
/// finite-sample optimal tempering from each dataset next to its limit.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalAlphaRow {
    pub n: usize,
    pub rep: usize,
    pub alpha_star_n: f64,
    pub alpha_tilde_star_n: f64,
    pub alpha_star: f64,
    pub alpha_tilde_star: f64,
}

impl CsvRow for OptimalAlphaRow {
    const COLUMNS: &'static [&'static str] =
        &["n", "rep", "alpha_star_n", "alpha_tilde_star_n", "alpha_star", "alpha_tilde_star"];
    fn cells(&self) -> Vec<String> {
        vec![
            self.n.to_string(),
            self.rep.to_string(),
            fmt(self.alpha_star_n),
            fmt(self.alpha_tilde_star_n),
            fmt(self.alpha_star),
            fmt(self.alpha_tilde_star),
        ]
    }
    fn sort_key(&self) -> (usize, usize, f64) {
        (self.n, self.rep, 0.0)
    }
}

pub fn optimal_alpha_study(settings: &Settings) -> Result<Vec<OptimalAlphaRow>> {
    let s = scenario(settings)?;
    let (lim, lim_tilde) = (limit_alpha_star(&s), limit_alpha_tilde(&s));
    run_jobs(settings, |n, rep| {
        let f = finite_inputs(settings, &settings.dataset(n, rep)?)?;
        Ok(vec![OptimalAlphaRow {
            n,
            rep,
            alpha_star_n: optimal_alpha(&s, &f)?,
            alpha_tilde_star_n: optimal_alpha_tilde(&s, &f)?,
            alpha_star: lim,
            alpha_tilde_star: lim_tilde,
        }])
    })
}

/// `n,rep,schedule,alpha_n,hellinger_sq,affinity` for the `α_n = α₀/n`
/// schedule and the constant `α = 1` control on the same dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct FailureRow {
    pub n: usize,
    pub rep: usize,
    pub schedule: &'static str,
    pub alpha_n: f64,
    pub hellinger_sq: f64,
    pub affinity: f64,
}

impl CsvRow for FailureRow {
    const COLUMNS: &'static [&'static str] = &["n", "rep", "schedule", "alpha_n", "hellinger_sq", "affinity"];
    fn cells(&self) -> Vec<String> {
        vec![
            self.n.to_string(),
            self.rep.to_string(),
            self.schedule.to_string(),
            fmt(self.alpha_n),
            fmt(self.hellinger_sq),
            fmt(self.affinity),
        ]
    }
    fn sort_key(&self) -> (usize, usize, f64) {
        (self.n, self.rep, self.alpha_n)
    }
}

pub fn failure_case(settings: &Settings) -> Result<Vec<FailureRow>> {
    let v = curvature(&settings.dgp);
    let schedules = [AlphaSchedule::InverseN(settings.failure_alpha0), AlphaSchedule::Constant(1.0)];
    run_jobs(settings, |n, rep| {
        let ds = settings.dataset(n, rep)?;
        schedules
            .iter()
            .map(|&schedule| {
                let pt = failure_point(&ds, &settings.dgp, &v, &settings.prior, schedule)?;
                Ok(FailureRow {
                    n,
                    rep,
                    schedule: schedule.label(),
                    alpha_n: pt.alpha_n,
                    hellinger_sq: pt.hellinger_sq,
                    affinity: pt.affinity,
                })
            })
            .collect()
    })
}

/// Per-replication diagnostics of the conjugate α-posterior `N(μ, Σ)`:
///
/// * `markov_bound`, `concentration_prob`: bound and exact mass of
///   `‖√n(θ − θ*)‖ > log n`;
/// * `lan_sup`: `sup |R_n(h)|` over `h ∈ [−3, 3]^p`;
/// * `prior_defect`, `lan_defect`: the two variational defects at the
///   mean-field α-posterior;
/// * `scaled_mean_dev`, `scaled_cov_norm`: `‖√n(μ − θ*)‖` and `‖nΣ‖_F`;
/// * `cov_rel_err`: `‖nΣ − V⁻¹/α‖_F / ‖V⁻¹/α‖_F`;
/// * `bvm_kl`: `KL(N(μ, Σ) ‖ N(θ̂_ML, V⁻¹/(αn)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionRow {
    pub n: usize,
    pub rep: usize,
    pub alpha: f64,
    pub markov_bound: f64,
    pub concentration_prob: f64,
    pub lan_sup: f64,
    pub prior_defect: f64,
    pub lan_defect: f64,
    pub scaled_mean_dev: f64,
    pub scaled_cov_norm: f64,
    pub cov_rel_err: f64,
    pub bvm_kl: f64,
}

impl CsvRow for AssumptionRow {
    const COLUMNS: &'static [&'static str] = &[
        "n",
        "rep",
        "alpha",
        "markov_bound",
        "concentration_prob",
        "lan_sup",
        "prior_defect",
        "lan_defect",
        "scaled_mean_dev",
        "scaled_cov_norm",
        "cov_rel_err",
        "bvm_kl",
    ];
    fn cells(&self) -> Vec<String> {
        let mut out = vec![self.n.to_string(), self.rep.to_string()];
        out.extend(
            [
                self.alpha,
                self.markov_bound,
                self.concentration_prob,
                self.lan_sup,
                self.prior_defect,
                self.lan_defect,
                self.scaled_mean_dev,
                self.scaled_cov_norm,
                self.cov_rel_err,
                self.bvm_kl,
            ]
            .map(fmt),
        );
        out
    }
    fn sort_key(&self) -> (usize, usize, f64) {
        (self.n, self.rep, self.alpha)
    }
}

pub fn assumption_checks(settings: &Settings) -> Result<Vec<AssumptionRow>> {
    let dgp = &settings.dgp;
    let star = pseudo_true(dgp);
    let v = curvature(dgp);
    let vinv = crate::linalg::spd_inverse(&v)?;
    run_jobs(settings, |n, rep| {
        let ds = settings.dataset(n, rep)?;
        let stats = ds.stats();
        let theta_hat = ols_from_stats(&stats)?;
        let lan_sup = lan_residual_sup(&ds, dgp, LAN_HALF_WIDTH, LAN_POINTS)?;
        let nf = n as f64;
        let r_n = nf.ln();
        let mut rng = rng_from_seed(derive_seed(settings.seed, &[n as u64, rep as u64, 1]));
        settings
            .alphas
            .iter()
            .map(|&alpha| {
                let post = conjugate_alpha_posterior_from_stats(&stats, &settings.prior, dgp.sigma_u, alpha)?;
                let q = variational_conjugate_cov(&ds, &settings.prior, dgp.sigma_u, alpha)?;
                let (prior_defect, lan_defect) = assumption2_terms(&q.mean, &q.cov(), dgp, &settings.prior, &ds)?;
                let n_cov = post.cov() * nf;
                let target = &vinv / alpha;
                let limit = gaussian_bvm_limit(&theta_hat, &v, n, alpha)?;
                Ok(AssumptionRow {
                    n,
                    rep,
                    alpha,
                    markov_bound: crate::regression::concentration_markov_bound(
                        post.mean(),
                        post.cov(),
                        &star,
                        r_n,
                        n,
                    )?,
                    concentration_prob: concentration_probability(
                        Posterior::Gaussian(&post),
                        &star,
                        n,
                        r_n,
                        &mut rng,
                    )?,
                    lan_sup,
                    prior_defect,
                    lan_defect,
                    scaled_mean_dev: ((post.mean() - &star) * nf.sqrt()).norm(),
                    scaled_cov_norm: n_cov.norm(),
                    cov_rel_err: (&n_cov - &target).norm() / target.norm(),
                    bvm_kl: kl_gaussian(&post, &limit)?,
                })
            })
            .collect()
    })
}

/// `n,rep,alpha,r_exact,r_star,abs_diff`: exact expected-KL criterion from
/// the simulated posteriors against its Gaussian surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct FidelityRow {
    pub n: usize,
    pub rep: usize,
    pub alpha: f64,
    pub r_exact: f64,
    pub r_star: f64,
    pub abs_diff: f64,
}

impl CsvRow for FidelityRow {
    const COLUMNS: &'static [&'static str] = &["n", "rep", "alpha", "r_exact", "r_star", "abs_diff"];
    fn cells(&self) -> Vec<String> {
        vec![
            self.n.to_string(),
            self.rep.to_string(),
            fmt(self.alpha),
            fmt(self.r_exact),
            fmt(self.r_star),
            fmt(self.abs_diff),
        ]
    }
    fn sort_key(&self) -> (usize, usize, f64) {
        (self.n, self.rep, self.alpha)
    }
}

pub fn surrogate_fidelity(settings: &Settings) -> Result<Vec<FidelityRow>> {
    let s = scenario(settings)?;
    run_jobs(settings, |n, rep| {
        let ds = settings.dataset(n, rep)?;
        let f = finite_inputs(settings, &ds)?;
        let exact = ExactCriterion::new(settings, &ds)?;
        settings
            .alphas
            .iter()
            .map(|&alpha| {
                let r_exact = exact.eval(alpha)?;
                let r = r_star(alpha, &s, &f)?;
                Ok(FidelityRow {
                    n,
                    rep,
                    alpha,
                    r_exact,
                    r_star: r,
                    abs_diff: (r_exact - r).abs(),
                })
            })
            .collect()
    })
}

/// Medians of `value(row)` grouped by `n` (ascending), over rows passing `keep`.
pub fn medians_by_n<R, K, V>(rows: &[R], n_of: impl Fn(&R) -> usize, keep: K, value: V) -> Vec<(usize, f64)>
where
    K: Fn(&R) -> bool,
    V: Fn(&R) -> f64,
{
    let mut ns: Vec<usize> = rows.iter().filter(|r| keep(r)).map(&n_of).collect();
    ns.sort_unstable();
    ns.dedup();
    ns.into_iter()
        .map(|n| {
            let vals: Vec<f64> = rows.iter().filter(|r| keep(r) && n_of(r) == n).map(&value).collect();
            (n, median(&vals))
        })
        .collect()
}
