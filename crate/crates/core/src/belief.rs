//! Gaussian beliefs, covariance repair, and ellipse level sets.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest eigenvalue a belief covariance is allowed to have.
pub const EPS_PD: f64 = 1e-9;

/// Mean and covariance of the state at one stage.
///
/// The constructor symmetrizes the covariance and, when needed, floors its
/// spectrum at [`EPS_PD`], so every value of this type is usable for sigma
/// point generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if n == 0 {
            return Err(Error::Dimension("belief mean must be non-empty".into()));
        }
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::Dimension(format!(
                "belief covariance is {}x{}, expected {n}x{n}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Config("belief has non-finite entries".into()));
        }
        let sym = symmetrize(&cov);
        let min_eig = sym.clone().symmetric_eigen().eigenvalues.min();
        let cov = if min_eig < EPS_PD {
            log::warn!("belief covariance has smallest eigenvalue {min_eig:e}; flooring at {EPS_PD:e}");
            psd_floor(&sym, EPS_PD)
        } else {
            sym
        };
        Ok(Self { mean, cov })
    }

    pub fn from_slices(mean: &[f64], cov_row_major: &[f64]) -> Result<Self> {
        let n = mean.len();
        if cov_row_major.len() != n * n {
            return Err(Error::Dimension(format!(
                "covariance has {} entries, expected {}",
                cov_row_major.len(),
                n * n
            )));
        }
        Self::new(
            DVector::from_column_slice(mean),
            DMatrix::from_row_slice(n, n, cov_row_major),
        )
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Lower-triangular square root of the covariance.
    pub fn sqrt_cov(&self) -> Result<DMatrix<f64>> {
        cholesky_sqrt(&self.cov)
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Lower-triangular `S` with `S Sᵀ = sigma`.
pub fn cholesky_sqrt(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !sigma.is_square() {
        return Err(Error::Dimension(format!(
            "covariance must be square, got {}x{}",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    let sym = symmetrize(sigma);
    let eigs = sym.clone().symmetric_eigen().eigenvalues;
    let min_eig = eigs.min();
    // Reassembly after flooring perturbs eigenvalues by a few ulps of the largest one.
    let slack = 64.0 * f64::EPSILON * eigs.amax();
    if !(min_eig >= EPS_PD - slack) {
        return Err(Error::DegenerateCovariance { min_eig, floor: EPS_PD });
    }
    sym.cholesky()
        .map(|c| c.l())
        .ok_or(Error::DegenerateCovariance { min_eig, floor: EPS_PD })
}

/// Clamps the spectrum of a symmetric matrix at `eps`. Inputs that already
/// satisfy the floor are returned symmetrized and otherwise untouched.
pub fn psd_floor(sigma: &DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    let sym = symmetrize(sigma);
    let eig = sym.clone().symmetric_eigen();
    if eig.eigenvalues.min() >= eps {
        return sym;
    }
    let clamped = eig.eigenvalues.map(|v| v.max(eps));
    let q = &eig.eigenvectors;
    symmetrize(&(q * DMatrix::from_diagonal(&clamped) * q.transpose()))
}

/// `{x : (x - center)ᵀ shape⁻¹ (x - center) = level}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipseLevelSet {
    pub center: DVector<f64>,
    pub shape: DMatrix<f64>,
    pub level: f64,
}

impl EllipseLevelSet {
    pub fn new(center: DVector<f64>, shape: DMatrix<f64>, level: f64) -> Result<Self> {
        if !(level > 0.0) {
            return Err(Error::Config(format!("ellipse level must be positive, got {level}")));
        }
        cholesky_sqrt(&shape)?;
        Ok(Self { center, shape, level })
    }

    /// Quadratic form value of `x`; equals `level` on the boundary.
    pub fn quadratic_form(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.center;
        let chol = symmetrize(&self.shape)
            .cholesky()
            .expect("ellipse shape is SPD by construction");
        d.dot(&chol.solve(&d))
    }
}

pub fn one_sigma_ellipse(b: &GaussianBelief) -> EllipseLevelSet {
    EllipseLevelSet {
        center: b.mean.clone(),
        shape: b.cov.clone(),
        level: 1.0,
    }
}

/// Level set through the non-central sigma points of `b`, i.e. level `n + λ = α² n`.
pub fn sigma_point_ellipse(b: &GaussianBelief, alpha: f64) -> EllipseLevelSet {
    let n = b.dim() as f64;
    let lambda = alpha * alpha * n - n;
    EllipseLevelSet {
        center: b.mean.clone(),
        shape: b.cov.clone(),
        level: n + lambda,
    }
}
