//! Operator splitting for
//!
//! ```text
//! minimize ‖G‖²_F  subject to  ‖C + D G‖₂ ≤ radius,  G[r, c] = 0 for r < start[c]
//! ```
//!
//! The consensus variable `Z = C + D G` lives in the spectral-norm ball; its
//! projection is singular-value clipping. The `G` step separates by column
//! and only needs `p × p` solves, where `p` is the number of rows of `C`.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct AdmmSettings {
    pub max_iter: usize,
    pub eps_abs: f64,
    pub rho: f64,
    /// Stop only once `σ_max(C + D G) ≤ radius + feas_tol`.
    pub feas_tol: f64,
    pub relaxation: f64,
    pub stall_window: usize,
    pub dual_limit: f64,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        Self {
            max_iter: 20_000,
            eps_abs: 1e-8,
            rho: 1.0,
            feas_tol: 1e-9,
            relaxation: 1.6,
            stall_window: 500,
            dual_limit: 1e8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum AdmmStatus {
    Converged,
    Infeasible(String),
    MaxIter,
}

#[derive(Debug, Clone)]
pub(crate) struct AdmmOutcome {
    pub g: DMatrix<f64>,
    pub status: AdmmStatus,
    pub iterations: usize,
}

pub(crate) struct BallProblem<'a> {
    pub c: &'a DMatrix<f64>,
    pub d: &'a DMatrix<f64>,
    /// First free row of each column of `G`; `d.ncols()` marks a fixed column.
    pub start: &'a [usize],
    pub radius: f64,
}

/// Contiguous run of columns sharing one start row.
struct ColumnGroup {
    start: usize,
    col0: usize,
    cols: usize,
}

impl BallProblem<'_> {
    fn groups(&self) -> Vec<ColumnGroup> {
        let mut out: Vec<ColumnGroup> = Vec::new();
        for (c, &s) in self.start.iter().enumerate() {
            match out.last_mut() {
                Some(g) if g.start == s && g.col0 + g.cols == c => g.cols += 1,
                _ => out.push(ColumnGroup {
                    start: s,
                    col0: c,
                    cols: 1,
                }),
            }
        }
        out
    }

    fn apply_d(&self, g: &DMatrix<f64>) -> DMatrix<f64> {
        self.c + self.d * g
    }

    /// `Dᵀ Y` restricted to the free pattern.
    fn masked_dt(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = self.d.transpose() * y;
        for (c, &s) in self.start.iter().enumerate() {
            for r in 0..s.min(out.nrows()) {
                out[(r, c)] = 0.0;
            }
        }
        out
    }
}

/// Singular values of `y`, via the eigenvalues of `y yᵀ` (`y` is short and wide).
fn left_spectrum(y: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let gram = y * y.transpose();
    let eig = ((&gram + gram.transpose()) * 0.5).symmetric_eigen();
    (eig.eigenvalues.map(|v| v.max(0.0).sqrt()), eig.eigenvectors)
}

pub(crate) fn spectral_norm(y: &DMatrix<f64>) -> f64 {
    if y.ncols() == 0 {
        return 0.0;
    }
    y.clone().svd(false, false).singular_values.max()
}

fn nuclear_norm(y: &DMatrix<f64>) -> f64 {
    left_spectrum(y).0.sum()
}

/// Projects `y` onto `{‖·‖₂ ≤ radius}` by clipping its singular values.
pub fn project_spectral_ball(y: &DMatrix<f64>, radius: f64) -> DMatrix<f64> {
    let (sv, u) = left_spectrum(y);
    if sv.max() <= radius {
        return y.clone();
    }
    let scale = sv.map(|s| if s > radius { radius / s } else { 1.0 });
    &u * DMatrix::from_diagonal(&scale) * u.transpose() * y
}

struct GroupFactor {
    /// `(2 I + ρ D_s D_sᵀ)^{-1}` for the group's free rows.
    inv: DMatrix<f64>,
}

fn factor_groups(prob: &BallProblem<'_>, groups: &[ColumnGroup], rho: f64) -> Vec<Option<GroupFactor>> {
    let p = prob.d.nrows();
    let k = prob.d.ncols();
    groups
        .iter()
        .map(|grp| {
            if grp.start >= k {
                return None;
            }
            let ds = prob.d.columns(grp.start, k - grp.start);
            let mut sys = ds * ds.transpose() * rho;
            for i in 0..p {
                sys[(i, i)] += 2.0;
            }
            let inv = sys.cholesky().expect("2I + ρ D Dᵀ is positive definite").inverse();
            Some(GroupFactor { inv })
        })
        .collect()
}

pub(crate) fn solve(prob: &BallProblem<'_>, settings: &AdmmSettings) -> AdmmOutcome {
    let p = prob.c.nrows();
    let q = prob.c.ncols();
    let k = prob.d.ncols();
    let groups = prob.groups();
    let mut g = DMatrix::zeros(k, q);

    // Columns no feedback can reach.
    let fixed: Vec<usize> = (0..q).filter(|&c| prob.start[c] >= k).collect();
    if !fixed.is_empty() {
        let cf = DMatrix::from_fn(p, fixed.len(), |r, j| prob.c[(r, fixed[j])]);
        let s = spectral_norm(&cf);
        if s > prob.radius * (1.0 + 1e-9) {
            return AdmmOutcome {
                g,
                status: AdmmStatus::Infeasible(format!(
                    "uncontrollable noise floor has normalized size {s:.6} > {:.6}",
                    prob.radius
                )),
                iterations: 0,
            };
        }
    }

    let mut rho = settings.rho;
    let mut factors = factor_groups(prob, &groups, rho);
    let mut z = project_spectral_ball(prob.c, prob.radius);
    let mut u = DMatrix::<f64>::zeros(p, q);
    let mut best_primal = f64::INFINITY;
    let mut stall = 0usize;
    let theta = settings.relaxation;

    for it in 1..=settings.max_iter {
        // G step, column group by column group.
        let v = &z - prob.c - &u;
        for (grp, fac) in groups.iter().zip(&factors) {
            let Some(fac) = fac else { continue };
            let rows = k - grp.start;
            let vg = v.columns(grp.col0, grp.cols);
            let ds = prob.d.columns(grp.start, rows);
            let block = ds.transpose() * (&fac.inv * vg) * rho;
            g.view_mut((grp.start, grp.col0), (rows, grp.cols)).copy_from(&block);
        }

        let x = prob.apply_d(&g);
        let x_relaxed = &x * theta + &z * (1.0 - theta);
        let z_prev = z;
        z = project_spectral_ball(&(&x_relaxed + &u), prob.radius);
        let step = &x_relaxed - &z;
        u += &step;

        let primal = (&x - &z).amax();
        let dual = rho * prob.masked_dt(&(&z - &z_prev)).amax();

        if primal <= settings.eps_abs && dual <= settings.eps_abs {
            let sigma = spectral_norm(&x);
            if sigma <= prob.radius + settings.feas_tol {
                return AdmmOutcome {
                    g,
                    status: AdmmStatus::Converged,
                    iterations: it,
                };
            }
        }

        if it > 100 && it % 10 == 0 {
            if let Some(reason) = infeasibility_certificate(prob, &step) {
                return AdmmOutcome {
                    g,
                    status: AdmmStatus::Infeasible(reason),
                    iterations: it,
                };
            }
        }
        if rho * u.amax() > settings.dual_limit {
            return AdmmOutcome {
                g,
                status: AdmmStatus::Infeasible(format!("dual variable exceeded {:e}", settings.dual_limit)),
                iterations: it,
            };
        }
        if primal < best_primal * 0.999 {
            best_primal = primal;
            stall = 0;
        } else if primal > settings.eps_abs {
            stall += 1;
            if stall >= settings.stall_window {
                return AdmmOutcome {
                    g,
                    status: AdmmStatus::Infeasible(format!(
                        "primal residual stalled at {best_primal:e} for {} iterations",
                        settings.stall_window
                    )),
                    iterations: it,
                };
            }
        }

        // Residual balancing.
        if it % 25 == 0 {
            let scale_p = primal / (x.amax().max(z.amax()).max(1e-12));
            let scale_d = dual / (rho * prob.masked_dt(&u).amax()).max(1e-12);
            let new_rho = if scale_p > 10.0 * scale_d {
                rho * 2.0
            } else if scale_d > 10.0 * scale_p {
                rho / 2.0
            } else {
                rho
            };
            let new_rho = new_rho.clamp(1e-6, 1e8);
            if new_rho != rho {
                u *= rho / new_rho;
                rho = new_rho;
                factors = factor_groups(prob, &groups, rho);
                best_primal = f64::INFINITY;
                stall = 0;
            }
        }
    }

    AdmmOutcome {
        g,
        status: AdmmStatus::MaxIter,
        iterations: settings.max_iter,
    }
}

/// A direction `Y` with `mask(Dᵀ Y) ≈ 0` and `⟨Y, C⟩ > radius ‖Y‖_*` separates
/// the affine image from the ball.
fn infeasibility_certificate(prob: &BallProblem<'_>, step: &DMatrix<f64>) -> Option<String> {
    let norm = step.norm();
    if norm < 1e-10 {
        return None;
    }
    let y = step / norm;
    let leak = prob.masked_dt(&y).norm() / prob.d.norm().max(1e-300);
    let gap = y.dot(prob.c) - prob.radius * nuclear_norm(&y);
    if leak <= 1e-7 && gap > 1e-6 {
        Some(format!("separating certificate with margin {gap:.3e}"))
    } else {
        None
    }
}
