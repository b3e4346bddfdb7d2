//! File formats written by the command-line front end.
//!
//! CSV floats use 17 significant digits so every value reads back bit-exact.
//! Matrices are flattened row-major.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::belief::{one_sigma_ellipse, sigma_point_ellipse, EllipseLevelSet, GaussianBelief};
use crate::error::{Error, Result};
use crate::greedy::GreedyRun;
use crate::lgcs::{SolveStatus, StageLaw};
use crate::montecarlo::{McReport, NoiseKind, Trajectory};

pub const POLICY_FILE: &str = "policy.json";
pub const BELIEFS_FILE: &str = "beliefs.csv";
pub const ELLIPSES_FILE: &str = "ellipses.csv";
pub const SIGMA_POINTS_FILE: &str = "sigma_points.csv";
pub const REPORT_FILE: &str = "mc_report.json";
pub const TRAJECTORIES_FILE: &str = "trajectories.csv";

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn push_row(out: &mut String, fields: impl IntoIterator<Item = String>) {
    let row: Vec<String> = fields.into_iter().collect();
    out.push_str(&row.join(","));
    out.push('\n');
}

fn vector_columns(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |i| format!("{prefix}_{i}"))
}

fn matrix_columns(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).flat_map(move |i| (1..=n).map(move |j| format!("{prefix}_{i}{j}")))
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().iter().copied().collect()
}

fn nested(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyStage {
    pub stage: usize,
    /// `m × n` gain, row-major.
    pub gain: Vec<f64>,
    pub upsilon: Vec<f64>,
    pub status: SolveStatus,
    pub cost: f64,
    pub slack: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefRecord {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

impl BeliefRecord {
    fn from_belief(b: &GaussianBelief) -> Self {
        Self {
            mean: b.mean().iter().copied().collect(),
            cov: nested(b.cov()),
        }
    }

    pub fn to_belief(&self) -> Result<GaussianBelief> {
        let n = self.mean.len();
        if self.cov.len() != n || self.cov.iter().any(|r| r.len() != n) {
            return Err(Error::Dimension(format!("belief covariance must be {n}x{n}")));
        }
        GaussianBelief::new(
            DVector::from_column_slice(&self.mean),
            DMatrix::from_row_iterator(n, n, self.cov.iter().flatten().copied()),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    pub state_dim: usize,
    pub input_dim: usize,
    pub start_stage: usize,
    pub horizon: usize,
    pub stages: Vec<PolicyStage>,
    pub initial_belief: BeliefRecord,
    /// Predicted belief at the horizon.
    pub terminal_belief: BeliefRecord,
}

impl PolicyFile {
    pub fn from_run(run: &GreedyRun) -> Self {
        let first = &run.beliefs[0];
        let stages = run
            .laws
            .iter()
            .zip(&run.diagnostics)
            .map(|(law, d)| PolicyStage {
                stage: law.stage,
                gain: row_major(&law.gain),
                upsilon: law.offset.iter().copied().collect(),
                status: d.status,
                cost: d.cost,
                slack: d.slack,
                iterations: d.iterations,
            })
            .collect();
        Self {
            state_dim: first.dim(),
            input_dim: run.laws.first().map(|l| l.offset.len()).unwrap_or(0),
            start_stage: run.start_stage,
            horizon: run.horizon,
            stages,
            initial_belief: BeliefRecord::from_belief(first),
            terminal_belief: BeliefRecord::from_belief(run.terminal()),
        }
    }

    pub fn laws(&self) -> Result<Vec<StageLaw>> {
        let (n, m) = (self.state_dim, self.input_dim);
        self.stages
            .iter()
            .map(|s| {
                if s.gain.len() != m * n || s.upsilon.len() != m {
                    return Err(Error::Dimension(format!(
                        "policy stage {} has {} gain entries and {} offsets, expected {} and {m}",
                        s.stage,
                        s.gain.len(),
                        s.upsilon.len(),
                        m * n
                    )));
                }
                Ok(StageLaw {
                    stage: s.stage,
                    gain: DMatrix::from_row_slice(m, n, &s.gain),
                    offset: DVector::from_column_slice(&s.upsilon),
                })
            })
            .collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_file(path, &text)
    }
}

/// `t,mu_1..,sigma_11..` with one row per stage.
pub fn beliefs_csv(run: &GreedyRun) -> String {
    let n = run.beliefs[0].dim();
    let mut out = String::new();
    push_row(
        &mut out,
        std::iter::once("t".to_string())
            .chain(vector_columns("mu", n))
            .chain(matrix_columns("sigma", n)),
    );
    for (i, b) in run.beliefs.iter().enumerate() {
        push_row(
            &mut out,
            std::iter::once((run.start_stage + i).to_string())
                .chain(b.mean().iter().map(|&v| num(v)))
                .chain(row_major(b.cov()).into_iter().map(num)),
        );
    }
    out
}

fn ellipse_row(out: &mut String, t: usize, kind: &str, e: &EllipseLevelSet) {
    push_row(
        out,
        [t.to_string(), kind.to_string()]
            .into_iter()
            .chain(e.center.iter().map(|&v| num(v)))
            .chain(row_major(&e.shape).into_iter().map(num))
            .chain(std::iter::once(num(e.level))),
    );
}

/// `t,kind,center_1..,shape_11..,level`: the set is `{x : (x−c)ᵀ shape⁻¹ (x−c) ≤ level}`.
///
/// Kinds: `belief` (one-sigma set of every predicted belief), `goal` (one-sigma
/// set of the target), `sigma_initial` and `sigma_goal` (the sets through the
/// sigma points of the initial and target beliefs).
pub fn ellipses_csv(run: &GreedyRun, goal: &GaussianBelief, alpha: f64) -> String {
    let n = goal.dim();
    let mut out = String::new();
    push_row(
        &mut out,
        ["t".to_string(), "kind".to_string()]
            .into_iter()
            .chain(vector_columns("center", n))
            .chain(matrix_columns("shape", n))
            .chain(std::iter::once("level".to_string())),
    );
    for (i, b) in run.beliefs.iter().enumerate() {
        ellipse_row(&mut out, run.start_stage + i, "belief", &one_sigma_ellipse(b));
    }
    ellipse_row(&mut out, run.horizon, "goal", &one_sigma_ellipse(goal));
    ellipse_row(
        &mut out,
        run.start_stage,
        "sigma_initial",
        &sigma_point_ellipse(&run.beliefs[0], alpha),
    );
    ellipse_row(&mut out, run.horizon, "sigma_goal", &sigma_point_ellipse(goal, alpha));
    out
}

/// `t,i,x_1..,gamma,delta`. Stage `start_stage` holds the initial sigma points;
/// every later stage holds the images of the previous stage's points.
pub fn sigma_points_csv(run: &GreedyRun) -> String {
    let n = run.beliefs[0].dim();
    let mut out = String::new();
    push_row(
        &mut out,
        ["t".to_string(), "i".to_string()]
            .into_iter()
            .chain(vector_columns("x", n))
            .chain(["gamma".to_string(), "delta".to_string()]),
    );
    let mut emit = |t: usize, points: &[DVector<f64>], s: &crate::unscented::SigmaSet| {
        for (i, p) in points.iter().enumerate() {
            push_row(
                &mut out,
                [t.to_string(), i.to_string()]
                    .into_iter()
                    .chain(p.iter().map(|&v| num(v)))
                    .chain([num(s.mean_weights[i]), num(s.cov_weights[i])]),
            );
        }
    };
    if let Some(first) = run.sigma_sets.first() {
        emit(run.start_stage, &first.points, first);
    }
    for (k, (images, s)) in run.propagated.iter().zip(&run.sigma_sets).enumerate() {
        emit(run.start_stage + k + 1, images, s);
    }
    out
}

/// `sample,t,x_1..`.
pub fn trajectories_csv(trajectories: &[Trajectory], start_stage: usize) -> String {
    let n = trajectories.first().map(|t| t.states[0].len()).unwrap_or(0);
    let mut out = String::new();
    push_row(
        &mut out,
        ["sample".to_string(), "t".to_string()]
            .into_iter()
            .chain(vector_columns("x", n)),
    );
    for tr in trajectories {
        for (k, x) in tr.states.iter().enumerate() {
            push_row(
                &mut out,
                [tr.sample.to_string(), (start_stage + k).to_string()]
                    .into_iter()
                    .chain(x.iter().map(|&v| num(v))),
            );
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub samples: usize,
    pub seed: u64,
    pub noise: NoiseKind,
    pub start_stage: usize,
    pub valid: usize,
    pub diverged: usize,
    pub empirical_mean: Vec<f64>,
    pub empirical_cov: Vec<Vec<f64>>,
    pub predicted: BeliefRecord,
    pub target: BeliefRecord,
    pub checks: Vec<CheckOutcome>,
    pub stage_means: Vec<Vec<f64>>,
    pub stage_covs: Vec<Vec<Vec<f64>>>,
}

impl ReportFile {
    pub fn new(
        report: &McReport,
        predicted: &GaussianBelief,
        target: &GaussianBelief,
        checks: Vec<CheckOutcome>,
    ) -> Self {
        Self {
            samples: report.samples,
            seed: report.seed,
            noise: report.noise,
            start_stage: report.start_stage,
            valid: report.valid,
            diverged: report.diverged,
            empirical_mean: report.empirical_mean.iter().copied().collect(),
            empirical_cov: nested(&report.empirical_cov),
            predicted: BeliefRecord::from_belief(predicted),
            target: BeliefRecord::from_belief(target),
            checks,
            stage_means: report.stage_means.iter().map(|m| m.iter().copied().collect()).collect(),
            stage_covs: report.stage_covs.iter().map(nested).collect(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_file(path, &text)
    }
}

pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    write_file(path, contents)
}
