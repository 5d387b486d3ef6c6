//! TOML run configuration.
//!
//! Every field except `seed` has a default; the `--seed` flag may supply the
//! seed instead. The resolved configuration (defaults filled in, command-line
//! overrides applied) is echoed into the JSON sidecar and re-parses to the
//! same value.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use tempered_core::alpha_posterior::ConjugatePrior;
use tempered_core::experiments::Settings;
use tempered_core::regression::{FullPrior, RegressionDGP};
use tempered_core::robustness::alpha_grid;

use crate::{CliError, Experiment};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// When present it must match the experiment named on the command line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<Experiment>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "defaults::replications")]
    pub replications: usize,
    #[serde(default = "defaults::n_grid")]
    pub n_grid: Vec<usize>,
    #[serde(default = "defaults::alphas")]
    pub alphas: Vec<f64>,
    #[serde(default)]
    pub curve: CurveConfig,
    #[serde(default = "defaults::eps")]
    pub eps: f64,
    #[serde(default = "defaults::grid_nodes")]
    pub grid_nodes: usize,
    #[serde(default = "defaults::failure_alpha0")]
    pub failure_alpha0: f64,
    #[serde(default = "defaults::out")]
    pub out: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(default)]
    pub dgp: DgpConfig,
    #[serde(default)]
    pub prior: PriorConfig,
}

/// Evenly spaced α-grid for `robustness-curve`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveConfig {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self {
            lo: 0.01,
            hi: 2.0,
            points: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpConfig {
    pub theta0: Vec<f64>,
    pub gamma0: Vec<f64>,
    pub sigma_eps: f64,
    /// Row-major blocks of the covariance of `(W, Z)`.
    pub cov_ww: Vec<Vec<f64>>,
    pub cov_wz: Vec<Vec<f64>>,
    pub cov_zz: Vec<Vec<f64>>,
    /// Defaults to the residual sd of the population projection on `W`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_u: Option<f64>,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            theta0: vec![1.0],
            gamma0: vec![1.0],
            sigma_eps: 1.0,
            cov_ww: vec![vec![1.0]],
            cov_wz: vec![vec![0.5]],
            cov_zz: vec![vec![1.0]],
            sigma_u: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    /// Conjugate prior `N(mean, σ_u² precision_scale⁻¹)`; `None` gives zero
    /// mean and identity precision scale.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision_scale: Option<Vec<Vec<f64>>>,
    /// Laplace(0, b) scale for the tabulated-posterior experiments.
    #[serde(default = "defaults::laplace_scale")]
    pub laplace_scale: f64,
    /// Isotropic precision of the zero-mean prior on `(θ, γ)`.
    #[serde(default = "defaults::full_precision")]
    pub full_precision: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            mean: None,
            precision_scale: None,
            laplace_scale: defaults::laplace_scale(),
            full_precision: defaults::full_precision(),
        }
    }
}

mod defaults {
    use std::path::PathBuf;

    pub fn replications() -> usize {
        200
    }
    pub fn n_grid() -> Vec<usize> {
        vec![50, 200, 1000, 5000, 10_000]
    }
    pub fn alphas() -> Vec<f64> {
        vec![0.25, 0.5, 0.75, 1.0]
    }
    pub fn eps() -> f64 {
        1.0
    }
    pub fn grid_nodes() -> usize {
        401
    }
    pub fn failure_alpha0() -> f64 {
        1.0
    }
    pub fn out() -> PathBuf {
        PathBuf::from("results")
    }
    pub fn laplace_scale() -> f64 {
        1.0
    }
    pub fn full_precision() -> f64 {
        1.0
    }
}

fn bad(field: &str, reason: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {reason}"))
}

fn matrix(field: &str, rows: &[Vec<f64>], shape: (usize, usize)) -> Result<DMatrix<f64>, CliError> {
    if rows.len() != shape.0 || rows.iter().any(|r| r.len() != shape.1) {
        return Err(bad(field, format!("expected a {}×{} matrix", shape.0, shape.1)));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(shape.0, shape.1, &flat))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("config: cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Checks the config against the requested experiment and converts it
    /// into library settings.
    pub fn settings(&self, experiment: Experiment) -> Result<Settings, CliError> {
        if let Some(named) = self.experiment {
            if named != experiment {
                return Err(bad(
                    "experiment",
                    format!("config is for `{named}` but `{experiment}` was requested"),
                ));
            }
        }
        let seed = self.seed.ok_or_else(|| bad("seed", "missing (set it in the config or pass --seed)"))?;
        if self.curve.points < 2 || !(self.curve.lo > 0.0 && self.curve.lo < self.curve.hi) {
            return Err(bad("curve", "need 0 < lo < hi and at least 2 points"));
        }
        if self.grid_nodes < tempered_core::alpha_posterior::MIN_GRID_NODES {
            return Err(bad(
                "grid_nodes",
                format!("must be at least {}", tempered_core::alpha_posterior::MIN_GRID_NODES),
            ));
        }
        if self.threads == Some(0) {
            return Err(bad("threads", "must be at least 1"));
        }

        let g = &self.dgp;
        let (p, d) = (g.theta0.len(), g.gamma0.len());
        let dgp = RegressionDGP::new(
            DVector::from_vec(g.theta0.clone()),
            DVector::from_vec(g.gamma0.clone()),
            g.sigma_eps,
            matrix("dgp.cov_ww", &g.cov_ww, (p, p))?,
            matrix("dgp.cov_wz", &g.cov_wz, (p, d))?,
            matrix("dgp.cov_zz", &g.cov_zz, (d, d))?,
            g.sigma_u,
        )
        .map_err(|e| bad("dgp", e))?;

        let pr = &self.prior;
        let mean = match &pr.mean {
            Some(m) if m.len() != p => return Err(bad("prior.mean", format!("expected {p} entries"))),
            Some(m) => DVector::from_vec(m.clone()),
            None => DVector::zeros(p),
        };
        let scale = match &pr.precision_scale {
            Some(rows) => matrix("prior.precision_scale", rows, (p, p))?,
            None => DMatrix::identity(p, p),
        };
        let prior = ConjugatePrior::new(mean, scale).map_err(|e| bad("prior", e))?;
        let full_prior = FullPrior::isotropic(p + d, pr.full_precision).map_err(|e| bad("prior.full_precision", e))?;

        let settings = Settings {
            seed,
            replications: self.replications,
            n_grid: self.n_grid.clone(),
            alphas: self.alphas.clone(),
            curve_alphas: alpha_grid(self.curve.lo, self.curve.hi, self.curve.points),
            eps: self.eps,
            grid_nodes: self.grid_nodes,
            dgp,
            prior,
            laplace_scale: pr.laplace_scale,
            full_prior,
            failure_alpha0: self.failure_alpha0,
        };
        settings.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(settings)
    }
}
