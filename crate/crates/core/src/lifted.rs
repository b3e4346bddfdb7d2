//! Stacked prediction matrices over the remaining horizon.
//!
//! For a stage-`k` linear model and `H = N - k` remaining steps the stacked
//! state `z = [z(k); …; z(N)]` satisfies
//!
//! ```text
//! z = Gz z(k) + Gu u + Gw (w + d̄)
//! ```
//!
//! with block `(i, j)` of `Gu` equal to `A^{i-j-1} B` for `i > j`.

use nalgebra::{DMatrix, DVector};

use crate::belief::{symmetrize, GaussianBelief};
use crate::error::{Error, Result};
use crate::linearize::LinearModel;

/// Relative eigenvalue cut used when factoring singular noise covariances.
const NOISE_RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct LiftedSystem {
    pub horizon: usize,
    pub n: usize,
    pub m: usize,
    pub stage: usize,
    pub gz: DMatrix<f64>,
    pub gu: DMatrix<f64>,
    pub gw: DMatrix<f64>,
    pub dbar: DVector<f64>,
    pub wbig: DMatrix<f64>,
    /// Full-column-rank factors `F_t` with `F_t F_tᵀ = W_t`, one per remaining stage.
    pub noise_factors: Vec<DMatrix<f64>>,
}

pub fn build_lifted(lm: &LinearModel, noise: &[DMatrix<f64>]) -> Result<LiftedSystem> {
    let n = lm.state_dim();
    let m = lm.input_dim();
    if lm.horizon_end <= lm.stage {
        return Err(Error::Dimension(format!(
            "remaining horizon must be at least 1 (stage {}, horizon end {})",
            lm.stage, lm.horizon_end
        )));
    }
    let h = lm.remaining_horizon();
    if noise.len() != h {
        return Err(Error::Dimension(format!(
            "expected {h} noise covariances for the remaining horizon, got {}",
            noise.len()
        )));
    }
    if let Some(w) = noise.iter().find(|w| w.shape() != (n, n)) {
        return Err(Error::Dimension(format!(
            "noise covariance has shape {:?}, expected ({n}, {n})",
            w.shape()
        )));
    }

    let mut powers = Vec::with_capacity(h + 1);
    powers.push(DMatrix::<f64>::identity(n, n));
    for i in 1..=h {
        let next = &lm.a * &powers[i - 1];
        powers.push(next);
    }
    let power_b: Vec<DMatrix<f64>> = powers.iter().map(|p| p * &lm.b).collect();

    let mut gz = DMatrix::zeros(n * (h + 1), n);
    let mut gu = DMatrix::zeros(n * (h + 1), m * h);
    let mut gw = DMatrix::zeros(n * (h + 1), n * h);
    for i in 0..=h {
        gz.view_mut((i * n, 0), (n, n)).copy_from(&powers[i]);
        for j in 0..i {
            gu.view_mut((i * n, j * m), (n, m)).copy_from(&power_b[i - j - 1]);
            gw.view_mut((i * n, j * n), (n, n)).copy_from(&powers[i - j - 1]);
        }
    }

    let mut dbar = DVector::zeros(n * h);
    let mut wbig = DMatrix::zeros(n * h, n * h);
    for (t, w) in noise.iter().enumerate() {
        dbar.rows_mut(t * n, n).copy_from(&lm.d);
        wbig.view_mut((t * n, t * n), (n, n)).copy_from(&symmetrize(w));
    }
    let noise_factors = noise.iter().map(noise_factor).collect();

    Ok(LiftedSystem {
        horizon: h,
        n,
        m,
        stage: lm.stage,
        gz,
        gu,
        gw,
        dbar,
        wbig,
        noise_factors,
    })
}

/// Reduced factor `F = V √Λ` of a PSD matrix, keeping eigenvalues above a
/// relative cut. The result has full column rank (possibly zero columns).
pub fn noise_factor(w: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(w).symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(1.0);
    let keep: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&i| eig.eigenvalues[i] > NOISE_RANK_TOL * scale)
        .collect();
    let mut f = DMatrix::zeros(w.nrows(), keep.len());
    for (c, &i) in keep.iter().enumerate() {
        f.set_column(c, &(eig.eigenvectors.column(i) * eig.eigenvalues[i].sqrt()));
    }
    f
}

impl LiftedSystem {
    /// Terminal selector `[0, …, 0, I]`.
    pub fn pn(&self) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(self.n, self.n * (self.horizon + 1));
        p.view_mut((0, self.n * self.horizon), (self.n, self.n))
            .fill_with_identity();
        p
    }

    /// Rows of a stacked-state matrix belonging to `z(N)`.
    pub fn terminal_rows(&self, stacked: &DMatrix<f64>) -> DMatrix<f64> {
        stacked.rows(self.n * self.horizon, self.n).into_owned()
    }

    /// Open-loop mean trajectory `Gz μ + Gw d̄`.
    pub fn open_loop_mean(&self, mu: &DVector<f64>) -> DVector<f64> {
        &self.gz * mu + &self.gw * &self.dbar
    }

    /// Block-diagonal stack of the noise factors.
    pub fn noise_factor_big(&self) -> DMatrix<f64> {
        let cols: usize = self.noise_factors.iter().map(|f| f.ncols()).sum();
        let mut f = DMatrix::zeros(self.n * self.horizon, cols);
        let mut c = 0;
        for (t, ft) in self.noise_factors.iter().enumerate() {
            f.view_mut((t * self.n, c), (self.n, ft.ncols())).copy_from(ft);
            c += ft.ncols();
        }
        f
    }

    /// `R = [Gz S, Gw F]`, a factor of the open-loop stacked covariance
    /// `Gz Σ Gzᵀ + Gw Wbig Gwᵀ = R Rᵀ`.
    pub fn disturbance_factor(&self, sqrt_cov: &DMatrix<f64>) -> DMatrix<f64> {
        let gzs = &self.gz * sqrt_cov;
        let gwf = &self.gw * self.noise_factor_big();
        let mut r = DMatrix::zeros(gzs.nrows(), gzs.ncols() + gwf.ncols());
        r.columns_mut(0, gzs.ncols()).copy_from(&gzs);
        r.columns_mut(gzs.ncols(), gwf.ncols()).copy_from(&gwf);
        r
    }

    /// Number of leading columns of `R` that stacked block `i` can depend on:
    /// the initial-state directions plus the noise directions of stages before `i`.
    pub fn causal_width(&self, block: usize) -> usize {
        self.n
            + self.noise_factors[..block.min(self.horizon)]
                .iter()
                .map(|f| f.ncols())
                .sum::<usize>()
    }

    pub(crate) fn check_belief(&self, b: &GaussianBelief) -> Result<()> {
        if b.dim() != self.n {
            return Err(Error::Dimension(format!(
                "belief has dimension {}, lifted system expects {}",
                b.dim(),
                self.n
            )));
        }
        Ok(())
    }
}

/// Terminal moments of the uncontrolled lifted system.
pub fn open_loop_moments(ls: &LiftedSystem, b: &GaussianBelief) -> Result<GaussianBelief> {
    ls.check_belief(b)?;
    let mean = ls.terminal_rows(&DMatrix::from_column_slice(
        ls.n * (ls.horizon + 1),
        1,
        ls.open_loop_mean(b.mean()).as_slice(),
    ));
    let stacked = &ls.gz * b.cov() * ls.gz.transpose() + &ls.gw * &ls.wbig * ls.gw.transpose();
    let pn = ls.pn();
    let cov = &pn * stacked * pn.transpose();
    GaussianBelief::new(mean.column(0).into_owned(), cov)
}
