//! TOML experiment configuration. Every key has a default, so an empty file
//! describes the reference Duffing scenario.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::belief::{cholesky_sqrt, GaussianBelief};
use crate::error::{Error, Result};
use crate::greedy::{GreedyConfig, LinearizationMode};
use crate::lgcs::SolverSettings;
use crate::models::{duffing_model, AffineModel, DuffingParams, SystemModel};
use crate::montecarlo::{McSettings, NoiseKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    pub steer: SteerConfig,
    pub solver: SolverSettings,
    pub montecarlo: MonteCarloConfig,
    pub checks: CheckConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum SystemConfig {
    Duffing(DuffingParams),
    /// `x+ = a x + b u + c + w`, `w ~ (0, w)`.
    Linear {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        #[serde(default)]
        c: Option<Vec<f64>>,
        w: Vec<Vec<f64>>,
    },
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig::Duffing(DuffingParams::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LinearizationPoint {
    #[default]
    AtBelief,
    AtGoal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteerConfig {
    #[serde(alias = "N")]
    pub horizon: usize,
    pub mu0: Vec<f64>,
    pub sigma0: Vec<Vec<f64>>,
    pub mu_f: Vec<f64>,
    pub sigma_f: Vec<Vec<f64>>,
    pub alpha: f64,
    pub beta: f64,
    pub linearization: LinearizationPoint,
    /// Input used with `linearization = "at_goal"`; zeros when omitted.
    pub nu_f: Option<Vec<f64>>,
}

impl Default for SteerConfig {
    fn default() -> Self {
        Self {
            horizon: 100,
            mu0: vec![0.0, 0.0],
            sigma0: vec![vec![6.25, 0.0], vec![0.0, 4.0]],
            mu_f: vec![0.0, 0.0],
            sigma_f: vec![vec![1.5625, 0.0], vec![0.0, 1.0]],
            alpha: 0.05,
            beta: 2.0,
            linearization: LinearizationPoint::AtBelief,
            nu_f: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloConfig {
    pub samples: usize,
    pub seed: u64,
    pub noise: NoiseKind,
    /// Number of sample paths written to `trajectories.csv`.
    pub trajectories: usize,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            seed: 42,
            noise: NoiseKind::Gaussian,
            trajectories: 50,
        }
    }
}

/// Tolerances used to judge how close a run lands to the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckConfig {
    /// Bound on `‖μ_N − μf‖₂`.
    pub terminal_mean: f64,
    /// Bound on `λ_max(Σ_N − Σf)` relative to `λ_max(Σf)`.
    pub terminal_cov_rel: f64,
    /// Same bound for the Monte Carlo covariance.
    pub empirical_cov_rel: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            terminal_mean: 0.05,
            terminal_cov_rel: 0.05,
            empirical_cov_rel: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("out"),
        }
    }
}

fn matrix(rows: &[Vec<f64>], key: &str) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map(Vec::len).unwrap_or(0);
    if rows.is_empty() || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(format!(
            "`{key}` must be a non-empty rectangular array of rows"
        )));
    }
    Ok(DMatrix::from_row_iterator(
        rows.len(),
        ncols,
        rows.iter().flatten().copied(),
    ))
}

fn covariance(mean: &[f64], rows: &[Vec<f64>], key: &str) -> Result<GaussianBelief> {
    let cov = matrix(rows, key)?;
    let n = mean.len();
    if cov.shape() != (n, n) {
        return Err(Error::Config(format!(
            "`{key}` must be {n}x{n} to match its mean, got {:?}",
            cov.shape()
        )));
    }
    let scale = cov.amax().max(1.0);
    if (&cov - cov.transpose()).amax() > 1e-12 * scale {
        return Err(Error::Config(format!("`{key}` is not symmetric")));
    }
    cholesky_sqrt(&cov).map_err(|e| Error::Config(format!("`{key}` is not positive definite: {e}")))?;
    GaussianBelief::new(DVector::from_column_slice(mean), cov)
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// The effective configuration with every default filled in.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration values are always representable in TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if self.steer.horizon == 0 {
            return Err(Error::Config("`steer.horizon` must be at least 1".into()));
        }
        if self.montecarlo.samples < 2 {
            return Err(Error::Config("`montecarlo.samples` must be at least 2".into()));
        }
        let model = self.model()?;
        let n = model.state_dim();
        if self.steer.mu0.len() != n || self.steer.mu_f.len() != n {
            return Err(Error::Config(format!(
                "`steer.mu0` and `steer.mu_f` must have length {n}"
            )));
        }
        self.initial_belief()?;
        self.goal()?;
        if let Some(nu) = &self.steer.nu_f {
            if nu.len() != model.input_dim() {
                return Err(Error::Config(format!(
                    "`steer.nu_f` must have length {}",
                    model.input_dim()
                )));
            }
        }
        if !(self.steer.alpha > 0.0 && self.steer.alpha <= 1.0) || !(self.steer.beta >= 0.0) {
            return Err(Error::Config(
                "`steer.alpha` must lie in (0, 1] and `steer.beta` be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<Box<dyn SystemModel>> {
        match &self.system {
            SystemConfig::Duffing(p) => Ok(Box::new(duffing_model(*p)?)),
            SystemConfig::Linear { a, b, c, w } => {
                let a = matrix(a, "system.a")?;
                let c = match c {
                    Some(c) => DVector::from_column_slice(c),
                    None => DVector::zeros(a.nrows()),
                };
                Ok(Box::new(AffineModel::new(
                    a,
                    matrix(b, "system.b")?,
                    c,
                    matrix(w, "system.w")?,
                )?))
            }
        }
    }

    pub fn initial_belief(&self) -> Result<GaussianBelief> {
        covariance(&self.steer.mu0, &self.steer.sigma0, "steer.sigma0")
    }

    pub fn goal(&self) -> Result<GaussianBelief> {
        covariance(&self.steer.mu_f, &self.steer.sigma_f, "steer.sigma_f")
    }

    pub fn greedy_config(&self, input_dim: usize) -> Result<GreedyConfig> {
        let linearization = match self.steer.linearization {
            LinearizationPoint::AtBelief => LinearizationMode::AtBelief,
            LinearizationPoint::AtGoal => LinearizationMode::AtGoal {
                nu_f: self.steer.nu_f.clone().unwrap_or_else(|| vec![0.0; input_dim]),
            },
        };
        Ok(GreedyConfig {
            horizon: self.steer.horizon,
            goal: self.goal()?,
            alpha: self.steer.alpha,
            beta: self.steer.beta,
            solver: self.solver,
            linearization,
        })
    }

    pub fn mc_settings(&self, threads: Option<usize>) -> McSettings {
        McSettings {
            samples: self.montecarlo.samples,
            seed: self.montecarlo.seed,
            noise: self.montecarlo.noise,
            threads,
            trajectories: self.montecarlo.trajectories,
        }
    }
}
