//! Linearized Gaussian covariance steering over the remaining horizon.
//!
//! The decision variables are a causal gain `L` acting on the open-loop
//! stacked state `y = Gz z(k) + Gw (w + d̄)` and an offset `ν`, so that the
//! stacked input is `u = L y + ν`. In these variables the expected input
//! energy is convex, the terminal mean is affine, and the terminal covariance
//! bound `M Mᵀ ⪯ Σf` is a spectral-norm ball constraint on `Σf^{-1/2} M`.
//!
//! The solver splits the problem exactly in two:
//!
//! * the expected input `ū = L ȳ + ν` only enters the cost through `‖ū‖²` and
//!   the mean constraint through `PN Gu ū`, so it is the minimum-norm
//!   solution of a linear system;
//! * the feedback only enters through `G = L R`, where `R` factors the
//!   open-loop stacked covariance. Causality of `L` is equivalent to a
//!   staircase pattern on `G`, and the remaining problem
//!   `min ‖G‖² s.t. ‖C + D G‖₂ ≤ 1` is solved by operator splitting.
//!
//! `L` is then rebuilt from `G` in innovation form and `ν = ū − L ȳ`.

mod admm;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::belief::{cholesky_sqrt, symmetrize, GaussianBelief};
use crate::error::{Error, Result};
use crate::lifted::LiftedSystem;

pub use admm::project_spectral_ball;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub tol_eq: f64,
    pub tol_psd: f64,
    pub max_iter: usize,
    /// Relax `Σf` to `Σf + s I` with the smallest workable `s` when infeasible.
    pub soften: bool,
    /// Absolute primal/dual residual target of the splitting iterations.
    pub eps_abs: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol_eq: 1e-7,
            tol_psd: 1e-7,
            max_iter: 20_000,
            soften: false,
            eps_abs: 1e-8,
        }
    }
}

/// Block-lower-triangular gain with `m × n` blocks `(i, j)`, `j ≤ i < H`.
/// The block column of `z(N)` is always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalGainMatrix {
    m: usize,
    n: usize,
    horizon: usize,
    dense: DMatrix<f64>,
}

impl CausalGainMatrix {
    pub fn zeros(m: usize, n: usize, horizon: usize) -> Self {
        Self {
            m,
            n,
            horizon,
            dense: DMatrix::zeros(m * horizon, n * (horizon + 1)),
        }
    }

    /// Wraps a dense matrix, rejecting any nonzero entry outside the causal pattern.
    pub fn from_dense(dense: DMatrix<f64>, m: usize, n: usize, horizon: usize) -> Result<Self> {
        if dense.shape() != (m * horizon, n * (horizon + 1)) {
            return Err(Error::Dimension(format!(
                "causal gain must be {}x{}, got {:?}",
                m * horizon,
                n * (horizon + 1),
                dense.shape()
            )));
        }
        for r in 0..dense.nrows() {
            for c in 0..dense.ncols() {
                if c / n > r / m && dense[(r, c)] != 0.0 {
                    return Err(Error::Dimension(format!(
                        "entry ({r}, {c}) lies outside the causal pattern"
                    )));
                }
            }
        }
        Ok(Self { m, n, horizon, dense })
    }

    pub fn dense(&self) -> &DMatrix<f64> {
        &self.dense
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        self.dense.view((i * self.m, j * self.n), (self.m, self.n)).into_owned()
    }
}

/// One affine law `u = υ + K x` for a single stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLaw {
    pub stage: usize,
    pub gain: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl StageLaw {
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.offset + &self.gain * x
    }
}

#[derive(Debug, Clone)]
pub struct SteeringSolution {
    pub stage: usize,
    pub gains: CausalGainMatrix,
    pub offsets: DVector<f64>,
    /// Expected stacked input `L ȳ + ν`.
    pub expected_input: DVector<f64>,
    pub cost: f64,
    pub mean_residual: f64,
    pub psd_violation: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    /// Slack added to `Σf` in soften mode (zero otherwise).
    pub slack: f64,
    /// Why the solve was declared infeasible, if it was.
    pub note: Option<String>,
}

fn check_shapes(l: &CausalGainMatrix, nu: &DVector<f64>, ls: &LiftedSystem, b: &GaussianBelief) -> Result<()> {
    ls.check_belief(b)?;
    if l.dense.shape() != (ls.m * ls.horizon, ls.n * (ls.horizon + 1)) {
        return Err(Error::Dimension(format!(
            "gain is {:?}, lifted system needs ({}, {})",
            l.dense.shape(),
            ls.m * ls.horizon,
            ls.n * (ls.horizon + 1)
        )));
    }
    if nu.len() != ls.m * ls.horizon {
        return Err(Error::Dimension(format!(
            "offset has length {}, lifted system needs {}",
            nu.len(),
            ls.m * ls.horizon
        )));
    }
    Ok(())
}

/// Expected input energy `E[uᵀu]` of the lifted closed loop.
pub fn predicted_cost(l: &CausalGainMatrix, nu: &DVector<f64>, ls: &LiftedSystem, b: &GaussianBelief) -> Result<f64> {
    check_shapes(l, nu, ls, b)?;
    let lm = &l.dense;
    let mean_input = lm * ls.open_loop_mean(b.mean()) + nu;
    let lgz = lm * &ls.gz;
    let lgw = lm * &ls.gw;
    let state_part = (&lgz * b.cov() * lgz.transpose()).trace();
    let noise_part = (&lgw * &ls.wbig * lgw.transpose()).trace();
    Ok(mean_input.norm_squared() + state_part + noise_part)
}

/// `M = PN (I + Gu L) [Gz Σ^{1/2}, Gw F]`, so the terminal covariance is `M Mᵀ`.
pub fn terminal_factor(l: &CausalGainMatrix, ls: &LiftedSystem, b: &GaussianBelief) -> Result<DMatrix<f64>> {
    ls.check_belief(b)?;
    let r = ls.disturbance_factor(&b.sqrt_cov()?);
    let pn_gu = ls.terminal_rows(&ls.gu);
    let closed = ls.terminal_rows(&r) + pn_gu * (&l.dense * &r);
    Ok(closed)
}

pub fn terminal_moments(
    l: &CausalGainMatrix,
    nu: &DVector<f64>,
    ls: &LiftedSystem,
    b: &GaussianBelief,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_shapes(l, nu, ls, b)?;
    let ybar = ls.open_loop_mean(b.mean());
    let pn_gu = ls.terminal_rows(&ls.gu);
    let mean = ybar.rows(ls.n * ls.horizon, ls.n).into_owned() + &pn_gu * (&l.dense * &ybar + nu);
    let m = terminal_factor(l, ls, b)?;
    Ok((mean, symmetrize(&(&m * m.transpose()))))
}

/// `max(0, λ_max(M Mᵀ − Σf))`.
pub fn psd_violation(m: &DMatrix<f64>, sigma_f: &DMatrix<f64>) -> f64 {
    let gap = symmetrize(&(m * m.transpose() - sigma_f));
    gap.symmetric_eigen().eigenvalues.max().max(0.0)
}

fn inv_sqrt_sym(sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(sigma).symmetric_eigen();
    let q = &eig.eigenvectors;
    q * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt())) * q.transpose()
}

/// Checks `[[Σf, M], [Mᵀ, I]] ⪰ 0` through its smallest eigenvalue.
pub fn schur_feasible(sigma_f: &DMatrix<f64>, m: &DMatrix<f64>, tol: f64) -> bool {
    let n = m.nrows();
    let q = m.ncols();
    let mut big = DMatrix::zeros(n + q, n + q);
    big.view_mut((0, 0), (n, n)).copy_from(&symmetrize(sigma_f));
    big.view_mut((0, n), (n, q)).copy_from(m);
    big.view_mut((n, 0), (q, n)).copy_from(&m.transpose());
    big.view_mut((n, n), (q, q)).fill_with_identity();
    big.symmetric_eigen().eigenvalues.min() >= -tol
}

/// Checks `‖Σf^{-1/2} M‖₂ ≤ 1`.
pub fn spectral_feasible(sigma_f: &DMatrix<f64>, m: &DMatrix<f64>, tol: f64) -> bool {
    admm::spectral_norm(&(inv_sqrt_sym(sigma_f) * m)) <= 1.0 + tol
}

/// Minimum-norm solution of `a x = b` and its residual `‖a x − b‖∞`.
fn min_norm_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, f64) {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cut = smax * 1e-12 * (a.nrows().max(a.ncols()) as f64);
    let x = svd.solve(b, cut).unwrap_or_else(|_| DVector::zeros(a.ncols()));
    let residual = (a * &x - b).amax();
    (x, residual)
}

/// Rebuilds a causal `L` with `L R = G` from the staircase feedback `G`.
///
/// Each noise block is recovered from consecutive open-loop states as
/// `ξ_t = F_t⁺ (y(t+1) − A y(t))` and the initial directions as `S⁻¹ y(0)`;
/// substituting these into `u_i = G_i [ξ_init; ξ_0; …]` gives the blocks of `L`.
fn gains_from_staircase(
    g: &DMatrix<f64>,
    ls: &LiftedSystem,
    a: &DMatrix<f64>,
    sqrt_cov: &DMatrix<f64>,
) -> CausalGainMatrix {
    let (n, m, h) = (ls.n, ls.m, ls.horizon);
    let s_inv = sqrt_cov
        .clone()
        .try_inverse()
        .expect("Cholesky factor of an SPD matrix is invertible");
    let pinvs: Vec<DMatrix<f64>> = ls
        .noise_factors
        .iter()
        .map(|f| {
            if f.ncols() == 0 {
                DMatrix::zeros(0, n)
            } else {
                f.clone()
                    .pseudo_inverse(0.0)
                    .expect("pseudo-inverse of a full-rank factor")
            }
        })
        .collect();
    let offsets: Vec<usize> = (0..=h).map(|t| ls.causal_width(t)).collect();

    let mut out = CausalGainMatrix::zeros(m, n, h);
    for i in 0..h {
        let rows = g.rows(i * m, m);
        let gs = rows.columns(0, n);
        let mut y0 = gs * &s_inv;
        if i > 0 && pinvs[0].nrows() > 0 {
            let g0 = rows.columns(offsets[0], pinvs[0].nrows());
            y0 -= g0 * &pinvs[0] * a;
        }
        out.dense.view_mut((i * m, 0), (m, n)).copy_from(&y0);
        for j in 1..=i {
            let mut blk = DMatrix::zeros(m, n);
            let prev = &pinvs[j - 1];
            if prev.nrows() > 0 {
                blk += rows.columns(offsets[j - 1], prev.nrows()) * prev;
            }
            if j < i && pinvs[j].nrows() > 0 {
                blk -= rows.columns(offsets[j], pinvs[j].nrows()) * &pinvs[j] * a;
            }
            out.dense.view_mut((i * m, j * n), (m, n)).copy_from(&blk);
        }
    }
    out
}

/// State matrix of the lifted system, read back from `Gz`.
fn lifted_a(ls: &LiftedSystem) -> DMatrix<f64> {
    ls.gz.view((ls.n, 0), (ls.n, ls.n)).into_owned()
}

struct CovarianceProblem {
    c: DMatrix<f64>,
    d: DMatrix<f64>,
    start: Vec<usize>,
}

fn covariance_problem(ls: &LiftedSystem, r: &DMatrix<f64>, sigma_f: &DMatrix<f64>) -> Result<CovarianceProblem> {
    let lf = cholesky_sqrt(sigma_f)?;
    let lf_inv = lf.try_inverse().ok_or(Error::DegenerateCovariance {
        min_eig: 0.0,
        floor: crate::belief::EPS_PD,
    })?;
    let c = &lf_inv * ls.terminal_rows(r);
    let d = &lf_inv * ls.terminal_rows(&ls.gu);
    let k = ls.m * ls.horizon;
    let start = (0..r.ncols())
        .map(|col| {
            (0..ls.horizon)
                .find(|&i| col < ls.causal_width(i))
                .map_or(k, |i| i * ls.m)
        })
        .collect();
    Ok(CovarianceProblem { c, d, start })
}

fn run_covariance(prob: &CovarianceProblem, sigma_f: &DMatrix<f64>, settings: &SolverSettings) -> admm::AdmmOutcome {
    let lam_max = sigma_f.clone().symmetric_eigen().eigenvalues.max();
    // Keep a sliver of margin so the final iterate clears `tol_psd` after rounding.
    let margin = (settings.tol_psd / (8.0 * lam_max)).min(1e-6);
    let ball = admm::BallProblem {
        c: &prob.c,
        d: &prob.d,
        start: &prob.start,
        radius: 1.0 - margin,
    };
    let admm_settings = admm::AdmmSettings {
        max_iter: settings.max_iter,
        eps_abs: settings.eps_abs,
        feas_tol: margin,
        ..Default::default()
    };
    admm::solve(&ball, &admm_settings)
}

/// Solves the stage-wise steering problem from `b_init` to `goal`.
///
/// Infeasibility and iteration limits are reported through the returned
/// status, not as errors.
pub fn solve_lgcs(
    ls: &LiftedSystem,
    b_init: &GaussianBelief,
    goal: &GaussianBelief,
    settings: &SolverSettings,
) -> Result<SteeringSolution> {
    ls.check_belief(b_init)?;
    ls.check_belief(goal)?;
    let sqrt_cov = b_init.sqrt_cov()?;
    let r = ls.disturbance_factor(&sqrt_cov);
    let ybar = ls.open_loop_mean(b_init.mean());
    let pn_gu = ls.terminal_rows(&ls.gu);

    let target = goal.mean() - ybar.rows(ls.n * ls.horizon, ls.n);
    let (expected_input, mean_gap) = min_norm_solve(&pn_gu, &target);
    let mut status = SolveStatus::Optimal;
    let mut note = None;
    if mean_gap > settings.tol_eq {
        let msg = format!("terminal mean unreachable (residual {mean_gap:e})");
        if settings.soften {
            log::warn!("stage {}: {msg}; keeping the least-squares mean", ls.stage);
        } else {
            status = SolveStatus::Infeasible;
        }
        note = Some(msg);
    }

    let prob = covariance_problem(ls, &r, goal.cov())?;
    let mut outcome = run_covariance(&prob, goal.cov(), settings);
    let mut slack = 0.0;
    match &outcome.status {
        admm::AdmmStatus::Converged => {}
        admm::AdmmStatus::MaxIter => {
            if status == SolveStatus::Optimal {
                status = SolveStatus::MaxIter;
            }
        }
        admm::AdmmStatus::Infeasible(reason) => {
            if settings.soften {
                let (s, softened) = soften_covariance(ls, &r, goal.cov(), settings)?;
                log::warn!("stage {}: terminal covariance relaxed by {s:e} ({reason})", ls.stage);
                slack = s;
                outcome = softened;
                if matches!(outcome.status, admm::AdmmStatus::MaxIter) && status == SolveStatus::Optimal {
                    status = SolveStatus::MaxIter;
                }
            } else {
                status = SolveStatus::Infeasible;
                note = Some(reason.clone());
            }
        }
    }

    let gains = gains_from_staircase(&outcome.g, ls, &lifted_a(ls), &sqrt_cov);
    let offsets = &expected_input - gains.dense() * &ybar;

    let (mean, _) = terminal_moments(&gains, &offsets, ls, b_init)?;
    let mean_residual = (&mean - goal.mean()).amax();
    let m = terminal_factor(&gains, ls, b_init)?;
    let effective_goal = goal.cov() + DMatrix::identity(ls.n, ls.n) * slack;
    let violation = psd_violation(&m, &effective_goal);
    let cost = predicted_cost(&gains, &offsets, ls, b_init)?;

    if status == SolveStatus::Optimal
        && (violation > settings.tol_psd || (!settings.soften && mean_residual > settings.tol_eq))
    {
        log::warn!(
            "stage {}: converged iterate fails re-check (mean {mean_residual:e}, psd {violation:e})",
            ls.stage
        );
        status = SolveStatus::MaxIter;
    }

    Ok(SteeringSolution {
        stage: ls.stage,
        gains,
        offsets,
        expected_input,
        cost,
        mean_residual,
        psd_violation: violation,
        iterations: outcome.iterations,
        status,
        slack,
        note,
    })
}

/// Smallest `s ≥ 0` (to bisection precision) for which `Σf + s I` is reachable,
/// together with the solve at that slack.
fn soften_covariance(
    ls: &LiftedSystem,
    r: &DMatrix<f64>,
    sigma_f: &DMatrix<f64>,
    settings: &SolverSettings,
) -> Result<(f64, admm::AdmmOutcome)> {
    let eye = DMatrix::identity(ls.n, ls.n);
    // Zero feedback is always admissible once Σf + s I dominates the open-loop covariance.
    let open = ls.terminal_rows(r);
    let mut hi = psd_violation(&open, sigma_f) * (1.0 + 1e-6) + settings.tol_psd;
    let mut lo = 0.0;
    let solve_at = |s: f64| -> Result<admm::AdmmOutcome> {
        let relaxed = sigma_f + &eye * s;
        let prob = covariance_problem(ls, r, &relaxed)?;
        Ok(run_covariance(&prob, &relaxed, settings))
    };
    let mut best = solve_at(hi)?;
    for _ in 0..40 {
        if hi - lo <= 1e-6 * hi.max(1e-12) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let out = solve_at(mid)?;
        // Only a converged solve certifies a slack; stalls near the boundary count as failures.
        if matches!(out.status, admm::AdmmStatus::Converged) {
            hi = mid;
            best = out;
        } else {
            lo = mid;
        }
    }
    Ok((hi, best))
}

/// Inverts `L = K (I − Gu K)^{-1}`, `ν = (I + L Gu) υ` by block forward
/// substitution on the unit-lower-triangular `I + L Gu`.
pub fn recover_feedback(
    l: &CausalGainMatrix,
    nu: &DVector<f64>,
    ls: &LiftedSystem,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if l.dense.shape() != (ls.m * ls.horizon, ls.n * (ls.horizon + 1)) || nu.len() != ls.m * ls.horizon {
        return Err(Error::Dimension(
            "gain/offset shapes do not match the lifted system".into(),
        ));
    }
    let m = ls.m;
    let t = &l.dense * &ls.gu;
    let mut k = l.dense.clone();
    let mut ups = nu.clone();
    for i in 1..ls.horizon {
        for j in 0..i {
            let tij = t.view((i * m, j * m), (m, m)).into_owned();
            let kj = k.rows(j * m, m).into_owned();
            let uj = ups.rows(j * m, m).into_owned();
            let mut ki = k.rows_mut(i * m, m);
            ki -= &tij * kj;
            let mut ui = ups.rows_mut(i * m, m);
            ui -= &tij * uj;
        }
    }
    Ok((k, ups))
}

/// Per-stage laws `K(t) = 𝓚[t, t]`, `υ(t)` of the recovered feedback. History
/// terms of `𝓚` below the block diagonal are not part of a stage law.
pub fn recover_laws(l: &CausalGainMatrix, nu: &DVector<f64>, ls: &LiftedSystem) -> Result<Vec<StageLaw>> {
    let (k, ups) = recover_feedback(l, nu, ls)?;
    let (n, m) = (ls.n, ls.m);
    Ok((0..ls.horizon)
        .map(|i| StageLaw {
            stage: ls.stage + i,
            gain: k.view((i * m, i * n), (m, n)).into_owned(),
            offset: ups.rows(i * m, m).into_owned(),
        })
        .collect())
}

/// Maps a causal feedback `(𝓚, υ)` to the convex variables `(L, ν)`.
pub fn convexify(
    k: &DMatrix<f64>,
    upsilon: &DVector<f64>,
    ls: &LiftedSystem,
) -> Result<(CausalGainMatrix, DVector<f64>)> {
    let (n, m, h) = (ls.n, ls.m, ls.horizon);
    let kc = CausalGainMatrix::from_dense(k.clone(), m, n, h)?;
    if upsilon.len() != m * h {
        return Err(Error::Dimension(
            "offset length does not match the lifted system".into(),
        ));
    }
    // L = (I − K Gu)^{-1} K by forward substitution.
    let t = &kc.dense * &ls.gu;
    let mut l = kc.dense.clone();
    for i in 1..h {
        for j in 0..i {
            let tij = t.view((i * m, j * m), (m, m)).into_owned();
            let lj = l.rows(j * m, m).into_owned();
            let mut li = l.rows_mut(i * m, m);
            li += &tij * lj;
        }
    }
    let nu = upsilon + &l * &ls.gu * upsilon;
    Ok((CausalGainMatrix::from_dense(l, m, n, h)?, nu))
}

/// The executed law of a solve: the first block rows of `L` and `ν`.
pub fn first_law(sol: &SteeringSolution) -> Result<StageLaw> {
    if sol.status != SolveStatus::Optimal {
        return Err(Error::PolicyExtraction(sol.status));
    }
    Ok(first_law_unchecked(sol))
}

pub(crate) fn first_law_unchecked(sol: &SteeringSolution) -> StageLaw {
    StageLaw {
        stage: sol.stage,
        gain: sol.gains.block(0, 0),
        offset: sol.offsets.rows(0, sol.gains.m).into_owned(),
    }
}
