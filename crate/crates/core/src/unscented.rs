//! Scaled unscented transform.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::belief::{cholesky_sqrt, psd_floor, symmetrize, GaussianBelief, EPS_PD};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaSet {
    /// `2n + 1` points: the mean, then `μ + c Sᵢ` for each column, then `μ − c Sᵢ`.
    pub points: Vec<DVector<f64>>,
    pub mean_weights: Vec<f64>,
    pub cov_weights: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl SigmaSet {
    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn sigma_points(b: &GaussianBelief, alpha: f64, beta: f64) -> Result<SigmaSet> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    if !(beta >= 0.0) {
        return Err(Error::Config(format!("beta must be non-negative, got {beta}")));
    }
    let n = b.dim();
    let nf = n as f64;
    let lambda = alpha * alpha * nf - nf;
    let spread = nf + lambda;
    let scaled = cholesky_sqrt(b.cov())? * spread.sqrt();

    let mut points = Vec::with_capacity(2 * n + 1);
    points.push(b.mean().clone());
    for i in 0..n {
        points.push(b.mean() + scaled.column(i));
    }
    for i in 0..n {
        points.push(b.mean() - scaled.column(i));
    }

    let side = 1.0 / (2.0 * spread);
    let mut mean_weights = vec![side; 2 * n + 1];
    let mut cov_weights = vec![side; 2 * n + 1];
    mean_weights[0] = lambda / spread;
    cov_weights[0] = lambda / spread + 1.0 - alpha * alpha + beta;

    Ok(SigmaSet {
        points,
        mean_weights,
        cov_weights,
        alpha,
        beta,
        lambda,
    })
}

/// Maps every point through `f`, failing on the first non-finite image.
pub fn propagate<F>(f: F, s: &SigmaSet) -> Result<Vec<DVector<f64>>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    s.points
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let y = f(p);
            if y.iter().all(|v| v.is_finite()) {
                Ok(y)
            } else {
                Err(Error::Propagation { index })
            }
        })
        .collect()
}

/// Weighted moments of already propagated points plus additive noise `w`.
/// The raw estimate can be indefinite when the centre weight is negative, so
/// it is floored before being wrapped into a belief.
pub fn predicted_moments(images: &[DVector<f64>], s: &SigmaSet, w: &DMatrix<f64>) -> Result<GaussianBelief> {
    if images.len() != s.len() {
        return Err(Error::Dimension(format!(
            "{} images for {} sigma points",
            images.len(),
            s.len()
        )));
    }
    let n = images[0].len();
    if w.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "noise covariance is {:?}, expected ({n}, {n})",
            w.shape()
        )));
    }
    let mut mean = DVector::zeros(n);
    for (y, g) in images.iter().zip(&s.mean_weights) {
        mean.axpy(*g, y, 1.0);
    }
    let mut cov = w.clone();
    for (y, d) in images.iter().zip(&s.cov_weights) {
        let e = y - &mean;
        cov.ger(*d, &e, &e, 1.0);
    }
    let cov = symmetrize(&cov);
    let min_eig = cov.clone().symmetric_eigen().eigenvalues.min();
    if min_eig < EPS_PD {
        log::warn!("predicted covariance floored: smallest eigenvalue {min_eig:e}");
    }
    GaussianBelief::new(mean, psd_floor(&cov, EPS_PD))
}

pub fn ut_propagate<F>(f_cl: F, s: &SigmaSet, w: &DMatrix<f64>) -> Result<GaussianBelief>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let images = propagate(f_cl, s)?;
    predicted_moments(&images, s, w)
}
