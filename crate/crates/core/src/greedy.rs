//! The greedy steering loop: linearize, solve, execute the first law, predict.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::belief::GaussianBelief;
use crate::error::{Error, Result};
use crate::lgcs::{first_law_unchecked, solve_lgcs, SolveStatus, SolverSettings, StageLaw, SteeringSolution};
use crate::lifted::build_lifted;
use crate::linearize::{linearize_at, linearize_at_goal, LinearModel};
use crate::models::{validated_noise_cov, SystemModel};
use crate::unscented::{predicted_moments, propagate, sigma_points, SigmaSet};

/// Where the dynamics are linearized at each stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LinearizationMode {
    /// At the predicted mean and expected input of the current belief.
    #[default]
    AtBelief,
    /// Once at the target mean with a fixed input.
    AtGoal { nu_f: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct GreedyConfig {
    pub horizon: usize,
    pub goal: GaussianBelief,
    pub alpha: f64,
    pub beta: f64,
    pub solver: SolverSettings,
    pub linearization: LinearizationMode,
}

impl GreedyConfig {
    pub fn new(horizon: usize, goal: GaussianBelief) -> Self {
        Self {
            horizon,
            goal,
            alpha: 0.05,
            beta: 2.0,
            solver: SolverSettings::default(),
            linearization: LinearizationMode::AtBelief,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDiagnostics {
    pub stage: usize,
    pub status: SolveStatus,
    pub cost: f64,
    pub mean_residual: f64,
    pub psd_violation: f64,
    pub iterations: usize,
    pub slack: f64,
    pub seconds: f64,
}

impl StageDiagnostics {
    fn from_solution(sol: &SteeringSolution, seconds: f64) -> Self {
        Self {
            stage: sol.stage,
            status: sol.status,
            cost: sol.cost,
            mean_residual: sol.mean_residual,
            psd_violation: sol.psd_violation,
            iterations: sol.iterations,
            slack: sol.slack,
            seconds,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GreedyRun {
    pub start_stage: usize,
    pub horizon: usize,
    /// Executed laws for stages `start_stage..horizon`.
    pub laws: Vec<StageLaw>,
    /// Predicted beliefs for stages `start_stage..=horizon`.
    pub beliefs: Vec<GaussianBelief>,
    /// Expected inputs used as linearization inputs, one per executed stage.
    pub nu_hats: Vec<DVector<f64>>,
    pub diagnostics: Vec<StageDiagnostics>,
    /// Sigma points drawn from each belief before propagation.
    pub sigma_sets: Vec<SigmaSet>,
    /// Their images under the closed loop.
    pub propagated: Vec<Vec<DVector<f64>>>,
}

impl GreedyRun {
    pub fn terminal(&self) -> &GaussianBelief {
        self.beliefs.last().expect("a run always holds its initial belief")
    }

    /// Stages whose goal covariance had to be relaxed.
    pub fn softened_stages(&self) -> usize {
        self.diagnostics.iter().filter(|d| d.slack > 0.0).count()
    }

    pub fn all_optimal(&self) -> bool {
        self.diagnostics.iter().all(|d| d.status == SolveStatus::Optimal)
    }
}

pub fn greedy_steer(model: &dyn SystemModel, b0: &GaussianBelief, cfg: &GreedyConfig) -> Result<GreedyRun> {
    greedy_steer_from(model, b0, &DVector::zeros(model.input_dim()), 0, cfg)
}

/// Runs the loop from stage `k_start` with the given belief and expected input.
pub fn greedy_steer_from(
    model: &dyn SystemModel,
    b_start: &GaussianBelief,
    nu_start: &DVector<f64>,
    k_start: usize,
    cfg: &GreedyConfig,
) -> Result<GreedyRun> {
    let (n, m, horizon) = (model.state_dim(), model.input_dim(), cfg.horizon);
    if horizon == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    if k_start >= horizon {
        return Err(Error::Config(format!(
            "start stage {k_start} must be below the horizon {horizon}"
        )));
    }
    if b_start.dim() != n || cfg.goal.dim() != n || nu_start.len() != m {
        return Err(Error::Dimension(format!(
            "model has state dimension {n} and input dimension {m}; got belief {}, goal {}, input {}",
            b_start.dim(),
            cfg.goal.dim(),
            nu_start.len()
        )));
    }
    let goal_input = match &cfg.linearization {
        LinearizationMode::AtBelief => None,
        LinearizationMode::AtGoal { nu_f } if nu_f.len() == m => Some(DVector::from_column_slice(nu_f)),
        LinearizationMode::AtGoal { nu_f } => {
            return Err(Error::Dimension(format!(
                "goal input has length {}, expected {m}",
                nu_f.len()
            )));
        }
    };
    let noise: Vec<DMatrix<f64>> = (0..horizon)
        .map(|t| validated_noise_cov(model, t))
        .collect::<Result<_>>()?;

    let stages = horizon - k_start;
    let mut run = GreedyRun {
        start_stage: k_start,
        horizon,
        laws: Vec::with_capacity(stages),
        beliefs: Vec::with_capacity(stages + 1),
        nu_hats: Vec::with_capacity(stages),
        diagnostics: Vec::with_capacity(stages),
        sigma_sets: Vec::with_capacity(stages),
        propagated: Vec::with_capacity(stages),
    };
    run.beliefs.push(b_start.clone());
    let mut nu_hat = nu_start.clone();

    for t in k_start..horizon {
        let clock = Instant::now();
        let belief = run.beliefs.last().unwrap().clone();
        let lm: LinearModel = match &goal_input {
            None => linearize_at(model, belief.mean(), &nu_hat, t, horizon)?,
            Some(u) => linearize_at_goal(model, cfg.goal.mean(), u, t, horizon)?,
        };
        let ls = build_lifted(&lm, &noise[t..])?;
        let sol = solve_lgcs(&ls, &belief, &cfg.goal, &cfg.solver)?;
        match sol.status {
            SolveStatus::Optimal => {}
            SolveStatus::Infeasible => {
                return Err(Error::Infeasible {
                    stage: t,
                    reason: sol.note.clone().unwrap_or_else(|| "no admissible policy".into()),
                });
            }
            SolveStatus::MaxIter => {
                log::warn!(
                    "stage {t}: solver stopped after {} iterations; executing its last iterate",
                    sol.iterations
                );
            }
        }
        if sol.slack > 0.0 {
            log::warn!("stage {t}: goal covariance relaxed by {:e}", sol.slack);
        }
        let law = first_law_unchecked(&sol);

        let sigma = sigma_points(&belief, cfg.alpha, cfg.beta)?;
        let images = propagate(|x| model.dynamics(x, &law.apply(x)), &sigma)?;
        let next = predicted_moments(&images, &sigma, &noise[t])?;

        run.nu_hats.push(nu_hat.clone());
        if ls.horizon > 1 {
            nu_hat = sol.expected_input.rows(m, m).into_owned();
        }
        run.diagnostics
            .push(StageDiagnostics::from_solution(&sol, clock.elapsed().as_secs_f64()));
        log::debug!(
            "stage {t}: cost {:.6e}, {} iterations, {:.3} s",
            sol.cost,
            sol.iterations,
            clock.elapsed().as_secs_f64()
        );
        run.laws.push(law);
        run.sigma_sets.push(sigma);
        run.propagated.push(images);
        run.beliefs.push(next);
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lgcs::first_law;
    use crate::models::{duffing_model, AffineModel, DuffingParams};
    use proptest::prelude::*;

    fn scalar(mu: f64, var: f64) -> GaussianBelief {
        GaussianBelief::from_slices(&[mu], &[var]).unwrap()
    }

    fn max_gap(cov: &DMatrix<f64>, target: &DMatrix<f64>) -> f64 {
        (cov - target).symmetric_eigen().eigenvalues.max()
    }

    #[test]
    fn linear_gaussian_lands_exactly() {
        let model = AffineModel::scalar(1.0, 1.0, 0.0, 0.01);
        let cfg = GreedyConfig::new(3, scalar(2.0, 0.5));
        let run = greedy_steer(&model, &scalar(0.0, 1.0), &cfg).unwrap();
        assert_eq!(run.laws.len(), 3);
        assert_eq!(run.beliefs.len(), 4);
        assert_eq!(run.beliefs[0], scalar(0.0, 1.0));
        assert!(run.all_optimal());
        let last = run.terminal();
        assert!((last.mean()[0] - 2.0).abs() <= 1e-6);
        assert!(max_gap(last.cov(), cfg.goal.cov()) <= 1e-6);
    }

    #[test]
    fn single_stage_is_one_solve_and_one_prediction() {
        let model = AffineModel::scalar(1.0, 1.0, 0.0, 0.1);
        let cfg = GreedyConfig::new(1, scalar(1.0, 0.5));
        let b0 = scalar(0.0, 1.0);
        let run = greedy_steer(&model, &b0, &cfg).unwrap();
        let lm = linearize_at(&model, b0.mean(), &DVector::zeros(1), 0, 1).unwrap();
        let ls = build_lifted(&lm, &[DMatrix::from_element(1, 1, 0.1)]).unwrap();
        let sol = solve_lgcs(&ls, &b0, &cfg.goal, &cfg.solver).unwrap();
        assert_eq!(run.laws, vec![first_law(&sol).unwrap()]);
        let k = run.laws[0].gain[(0, 0)];
        assert!((run.terminal().cov()[(0, 0)] - ((1.0 + k) * (1.0 + k) + 0.1)).abs() <= 1e-10);
        assert!((run.terminal().mean()[0] - 1.0).abs() <= 1e-7);
    }

    #[test]
    fn infeasible_stage_aborts_with_its_index() {
        let model = AffineModel::scalar(1.0, 1.0, 0.0, 0.1);
        let cfg = GreedyConfig::new(2, scalar(0.0, 0.05));
        match greedy_steer(&model, &scalar(0.0, 1.0), &cfg) {
            Err(Error::Infeasible { stage, .. }) => assert_eq!(stage, 0),
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn soften_continues_with_slack() {
        let model = AffineModel::scalar(1.0, 1.0, 0.0, 0.1);
        let mut cfg = GreedyConfig::new(2, scalar(0.0, 0.05));
        cfg.solver.soften = true;
        let run = greedy_steer(&model, &scalar(0.0, 1.0), &cfg).unwrap();
        assert_eq!(run.laws.len(), 2);
        assert!(run.softened_stages() > 0);
    }

    #[test]
    fn bad_arguments() {
        let model = AffineModel::scalar(1.0, 1.0, 0.0, 0.1);
        let b = scalar(0.0, 1.0);
        assert!(greedy_steer(&model, &b, &GreedyConfig::new(0, scalar(0.0, 1.0))).is_err());
        assert!(greedy_steer_from(
            &model,
            &b,
            &DVector::zeros(1),
            3,
            &GreedyConfig::new(3, scalar(0.0, 1.0))
        )
        .is_err());
        let two = GaussianBelief::from_slices(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(greedy_steer(&model, &two, &GreedyConfig::new(2, scalar(0.0, 1.0))).is_err());
        let mut cfg = GreedyConfig::new(2, scalar(0.0, 1.0));
        cfg.linearization = LinearizationMode::AtGoal { nu_f: vec![0.0, 0.0] };
        assert!(greedy_steer(&model, &b, &cfg).is_err());
    }

    fn planar_affine() -> AffineModel {
        AffineModel::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.1, -0.1, 0.95]),
            DMatrix::from_row_slice(2, 1, &[0.0, 0.1]),
            DVector::from_vec(vec![0.0, 0.02]),
            DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.001]),
        )
        .unwrap()
    }

    fn planar_cfg(horizon: usize) -> GreedyConfig {
        GreedyConfig::new(
            horizon,
            GaussianBelief::from_slices(&[0.3, 0.0], &[0.6, 0.0, 0.0, 0.5]).unwrap(),
        )
    }

    #[test]
    fn executed_laws_match_fresh_solves() {
        let model = planar_affine();
        let cfg = planar_cfg(6);
        let b0 = GaussianBelief::from_slices(&[1.0, -0.5], &[1.0, 0.2, 0.2, 0.8]).unwrap();
        let run = greedy_steer(&model, &b0, &cfg).unwrap();
        for t in 0..6 {
            let lm = linearize_at(&model, run.beliefs[t].mean(), &run.nu_hats[t], t, 6).unwrap();
            let noise = vec![model.w.clone(); 6 - t];
            let ls = build_lifted(&lm, &noise).unwrap();
            let sol = solve_lgcs(&ls, &run.beliefs[t], &cfg.goal, &cfg.solver).unwrap();
            let fresh = first_law(&sol).unwrap();
            assert!((&fresh.gain - &run.laws[t].gain).amax() <= 1e-8, "stage {t}");
            assert!((&fresh.offset - &run.laws[t].offset).amax() <= 1e-8, "stage {t}");
        }
    }

    #[test]
    fn truncated_runs_reproduce_the_tail() {
        let model = planar_affine();
        let cfg = planar_cfg(6);
        let b0 = GaussianBelief::from_slices(&[1.0, -0.5], &[1.0, 0.2, 0.2, 0.8]).unwrap();
        let full = greedy_steer(&model, &b0, &cfg).unwrap();
        for j in [1, 3, 5] {
            let tail = greedy_steer_from(&model, &full.beliefs[j], &full.nu_hats[j], j, &cfg).unwrap();
            assert_eq!(tail.laws.len(), 6 - j);
            for (a, b) in tail.laws.iter().zip(&full.laws[j..]) {
                assert_eq!(a.stage, b.stage);
                assert!((&a.gain - &b.gain).amax() <= 1e-8);
                assert!((&a.offset - &b.offset).amax() <= 1e-8);
            }
        }
    }

    #[test]
    fn goal_linearization_on_affine_model_matches_belief_linearization() {
        let model = planar_affine();
        let b0 = GaussianBelief::from_slices(&[1.0, -0.5], &[1.0, 0.2, 0.2, 0.8]).unwrap();
        let a = greedy_steer(&model, &b0, &planar_cfg(4)).unwrap();
        let mut cfg = planar_cfg(4);
        cfg.linearization = LinearizationMode::AtGoal { nu_f: vec![0.0] };
        let b = greedy_steer(&model, &b0, &cfg).unwrap();
        for (x, y) in a.laws.iter().zip(&b.laws) {
            assert!((&x.gain - &y.gain).amax() <= 1e-8);
        }
    }

    #[test]
    fn short_duffing_run() {
        let model = duffing_model(DuffingParams::default()).unwrap();
        let b0 = GaussianBelief::from_slices(&[0.0, 0.0], &[6.25, 0.0, 0.0, 4.0]).unwrap();
        let goal = GaussianBelief::from_slices(&[0.0, 0.0], &[1.5625, 0.0, 0.0, 1.0]).unwrap();
        let run = greedy_steer(&model, &b0, &GreedyConfig::new(40, goal.clone())).unwrap();
        assert!(run.all_optimal());
        assert_eq!(run.softened_stages(), 0);
        assert_eq!(run.sigma_sets.len(), 40);
        assert!(run.propagated.iter().all(|p| p.len() == 5));
        let last = run.terminal();
        assert!(last.mean().norm() <= 0.05);
        assert!(max_gap(last.cov(), goal.cov()) <= 0.05 * 1.5625);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn beliefs_stay_valid(mu in -1.0..1.0f64, var in 0.5..2.0f64, target in 0.3..1.5f64) {
            let model = AffineModel::scalar(1.05, 0.5, 0.1, 0.01);
            let cfg = GreedyConfig::new(4, scalar(0.0, target));
            let run = greedy_steer(&model, &scalar(mu, var), &cfg).unwrap();
            for b in &run.beliefs {
                prop_assert!(b.cov()[(0, 0)] > 0.0);
            }
            prop_assert!((run.terminal().mean()[0]).abs() <= 1e-6);
            prop_assert!(run.terminal().cov()[(0, 0)] <= target + 1e-6);
        }
    }
}
