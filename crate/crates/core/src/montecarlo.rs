//! Closed-loop Monte Carlo validation of an executed policy.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::belief::{cholesky_sqrt, symmetrize, GaussianBelief};
use crate::error::{Error, Result};
use crate::lgcs::StageLaw;
use crate::lifted::noise_factor;
use crate::models::{validated_noise_cov, SystemModel};

/// Samples with any state coordinate beyond this magnitude are dropped.
pub const DIVERGENCE_BOUND: f64 = 1e9;

/// Samples per reduction chunk. Fixed so results do not depend on the thread count.
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    Gaussian,
    /// Independent uniform coordinates with zero mean and unit variance.
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McSettings {
    pub samples: usize,
    pub seed: u64,
    pub noise: NoiseKind,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
    /// How many sample paths to keep in full.
    pub trajectories: usize,
}

impl McSettings {
    pub fn new(samples: usize, seed: u64) -> Self {
        Self {
            samples,
            seed,
            noise: NoiseKind::Gaussian,
            threads: None,
            trajectories: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McReport {
    pub samples: usize,
    pub seed: u64,
    pub noise: NoiseKind,
    pub start_stage: usize,
    pub valid: usize,
    pub diverged: usize,
    pub empirical_mean: DVector<f64>,
    /// Unbiased (divides by `valid − 1`).
    pub empirical_cov: DMatrix<f64>,
    /// Moments at every stage from `start_stage` to the horizon.
    pub stage_means: Vec<DVector<f64>>,
    pub stage_covs: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub sample: usize,
    pub states: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
struct Moments {
    count: usize,
    mean: DVector<f64>,
    scatter: DMatrix<f64>,
}

impl Moments {
    fn empty(n: usize) -> Self {
        Self {
            count: 0,
            mean: DVector::zeros(n),
            scatter: DMatrix::zeros(n, n),
        }
    }

    fn push(&mut self, x: &DVector<f64>) {
        self.count += 1;
        let delta = x - &self.mean;
        self.mean.axpy(1.0 / self.count as f64, &delta, 1.0);
        let after = x - &self.mean;
        self.scatter.ger(1.0, &delta, &after, 1.0);
    }

    fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let total = na + nb;
        let delta = &other.mean - &self.mean;
        self.mean.axpy(nb / total, &delta, 1.0);
        self.scatter += &other.scatter;
        self.scatter.ger(na * nb / total, &delta, &delta, 1.0);
        self.count += other.count;
    }

    fn covariance(&self) -> DMatrix<f64> {
        if self.count < 2 {
            return DMatrix::from_element(self.mean.len(), self.mean.len(), f64::NAN);
        }
        symmetrize(&(&self.scatter / (self.count as f64 - 1.0)))
    }
}

pub(crate) fn sample_rng(seed: u64, sample: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample as u64);
    rng
}

pub(crate) fn draw_standard(rng: &mut ChaCha8Rng, kind: NoiseKind, dim: usize) -> DVector<f64> {
    let half_width = 3f64.sqrt();
    DVector::from_fn(dim, |_, _| match kind {
        NoiseKind::Gaussian => rng.sample::<f64, _>(StandardNormal),
        NoiseKind::Uniform => rng.random_range(-half_width..half_width),
    })
}

struct Plan<'a> {
    model: &'a dyn SystemModel,
    laws: &'a [StageLaw],
    mean0: DVector<f64>,
    sqrt0: DMatrix<f64>,
    noise: Vec<DMatrix<f64>>,
    kind: NoiseKind,
    seed: u64,
}

impl Plan<'_> {
    /// The full path of one sample, or `None` if it diverged.
    fn path(&self, sample: usize) -> Option<Vec<DVector<f64>>> {
        let mut rng = sample_rng(self.seed, sample);
        let n = self.mean0.len();
        let mut x = &self.mean0 + &self.sqrt0 * draw_standard(&mut rng, self.kind, n);
        let mut states = Vec::with_capacity(self.laws.len() + 1);
        states.push(x.clone());
        for (law, f) in self.laws.iter().zip(&self.noise) {
            let w = f * draw_standard(&mut rng, self.kind, f.ncols());
            x = self.model.dynamics(&x, &law.apply(&x)) + w;
            if x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND) {
                return None;
            }
            states.push(x.clone());
        }
        Some(states)
    }

    fn chunk(&self, range: std::ops::Range<usize>) -> (Vec<Moments>, usize) {
        let n = self.mean0.len();
        let mut stats = vec![Moments::empty(n); self.laws.len() + 1];
        let mut diverged = 0;
        for sample in range {
            match self.path(sample) {
                Some(states) => stats.iter_mut().zip(&states).for_each(|(m, x)| m.push(x)),
                None => diverged += 1,
            }
        }
        (stats, diverged)
    }
}

fn check_laws(model: &dyn SystemModel, laws: &[StageLaw]) -> Result<()> {
    let (n, m) = (model.state_dim(), model.input_dim());
    let first = laws.first().map(|l| l.stage).unwrap_or(0);
    for (i, law) in laws.iter().enumerate() {
        if law.stage != first + i {
            return Err(Error::Config(format!(
                "policy stages must be consecutive; entry {i} has stage {}",
                law.stage
            )));
        }
        if law.gain.shape() != (m, n) || law.offset.len() != m {
            return Err(Error::Dimension(format!(
                "law for stage {} has gain {:?} and offset {}, the model needs ({m}, {n}) and {m}",
                law.stage,
                law.gain.shape(),
                law.offset.len()
            )));
        }
    }
    Ok(())
}

/// Simulates `x(t+1) = f(x, υ(t) + K(t) x) + w(t)` from samples of `b0`
/// under the given consecutive laws.
pub fn simulate_closed_loop(
    model: &dyn SystemModel,
    laws: &[StageLaw],
    b0: &GaussianBelief,
    settings: &McSettings,
) -> Result<(McReport, Vec<Trajectory>)> {
    if settings.samples < 2 {
        return Err(Error::Config(format!(
            "at least 2 samples are needed, got {}",
            settings.samples
        )));
    }
    if b0.dim() != model.state_dim() {
        return Err(Error::Dimension(format!(
            "initial belief has dimension {}, model state has {}",
            b0.dim(),
            model.state_dim()
        )));
    }
    check_laws(model, laws)?;
    let start_stage = laws.first().map(|l| l.stage).unwrap_or(0);
    let noise = laws
        .iter()
        .map(|l| validated_noise_cov(model, l.stage).map(|w| noise_factor(&w)))
        .collect::<Result<Vec<_>>>()?;
    let plan = Plan {
        model,
        laws,
        mean0: b0.mean().clone(),
        sqrt0: cholesky_sqrt(b0.cov())?,
        noise,
        kind: settings.noise,
        seed: settings.seed,
    };

    let chunks: Vec<_> = (0..settings.samples)
        .step_by(CHUNK)
        .map(|s| s..(s + CHUNK).min(settings.samples))
        .collect();
    let run = || -> Vec<(Vec<Moments>, usize)> { chunks.par_iter().map(|r| plan.chunk(r.clone())).collect() };
    let partials = match settings.threads {
        Some(threads) => rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker threads: {e}")))?
            .install(run),
        None => run(),
    };

    let n = model.state_dim();
    let mut stats = vec![Moments::empty(n); laws.len() + 1];
    let mut diverged = 0;
    for (part, div) in &partials {
        stats.iter_mut().zip(part).for_each(|(a, b)| a.merge(b));
        diverged += div;
    }
    if diverged > 0 {
        log::warn!("{diverged} of {} samples diverged and were excluded", settings.samples);
    }
    let valid = settings.samples - diverged;
    if valid < 2 {
        return Err(Error::Config(format!("only {valid} samples stayed bounded")));
    }
    let last = stats.last().unwrap();
    let report = McReport {
        samples: settings.samples,
        seed: settings.seed,
        noise: settings.noise,
        start_stage,
        valid,
        diverged,
        empirical_mean: last.mean.clone(),
        empirical_cov: last.covariance(),
        stage_means: stats.iter().map(|s| s.mean.clone()).collect(),
        stage_covs: stats.iter().map(|s| s.covariance()).collect(),
    };

    let trajectories = (0..settings.trajectories.min(settings.samples))
        .filter_map(|sample| plan.path(sample).map(|states| Trajectory { sample, states }))
        .collect();
    Ok((report, trajectories))
}
