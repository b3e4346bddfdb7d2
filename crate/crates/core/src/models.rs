//! Nonlinear system interface and the built-in benchmark systems.
//!
//! A model supplies the noise-free map `x(t+1) = f(x(t), u(t))`, the stage
//! noise covariance `W(t)`, and optionally analytic Jacobians. Models are
//! immutable once built and can be shared across threads.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Eigenvalues of a noise covariance below this are treated as invalid.
const NOISE_EIG_TOL: f64 = 1e-12;

pub trait SystemModel: Send + Sync {
    fn state_dim(&self) -> usize;

    fn input_dim(&self) -> usize;

    /// Noise-free part of the transition map.
    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    fn jacobian_x(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    fn jacobian_u(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    /// Covariance of the additive noise entering at stage `t`.
    fn noise_cov(&self, t: usize) -> DMatrix<f64>;
}

/// Evaluates `f(x, u)` after checking dimensions. No noise is added.
pub fn eval_dynamics(model: &dyn SystemModel, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    check_dims(model, x, u)?;
    Ok(model.dynamics(x, u))
}

pub(crate) fn check_dims(model: &dyn SystemModel, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
    if x.len() != model.state_dim() {
        return Err(Error::Dimension(format!(
            "state has length {}, model expects {}",
            x.len(),
            model.state_dim()
        )));
    }
    if u.len() != model.input_dim() {
        return Err(Error::Dimension(format!(
            "input has length {}, model expects {}",
            u.len(),
            model.input_dim()
        )));
    }
    Ok(())
}

/// Returns `W(t)` symmetrized with tiny negative eigenvalues clipped to zero.
pub fn validated_noise_cov(model: &dyn SystemModel, t: usize) -> Result<DMatrix<f64>> {
    let n = model.state_dim();
    let w = model.noise_cov(t);
    if w.nrows() != n || w.ncols() != n {
        return Err(Error::Dimension(format!(
            "noise covariance at stage {t} is {}x{}, expected {n}x{n}",
            w.nrows(),
            w.ncols()
        )));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config(format!(
            "noise covariance at stage {t} has non-finite entries"
        )));
    }
    let sym = (&w + w.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    let min_eig = eig.eigenvalues.min();
    if min_eig < -NOISE_EIG_TOL {
        return Err(Error::Config(format!(
            "noise covariance at stage {t} is not positive semidefinite (eigenvalue {min_eig:e})"
        )));
    }
    if min_eig >= 0.0 {
        return Ok(sym);
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let q = &eig.eigenvectors;
    let out = q * DMatrix::from_diagonal(&clipped) * q.transpose();
    Ok((&out + out.transpose()) * 0.5)
}

/// Parameters of the discretized Duffing-type oscillator.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DuffingParams {
    pub tau: f64,
    pub delta: f64,
    pub zeta: f64,
    pub gamma_damp: f64,
    /// Noise intensity; the second state receives variance `tau * sigma_w^2` per step.
    pub sigma_w: f64,
}

impl Default for DuffingParams {
    fn default() -> Self {
        Self {
            tau: 0.01,
            delta: -1.0,
            zeta: 0.05,
            gamma_damp: 0.05,
            sigma_w: 1.0,
        }
    }
}

/// Euler-discretized Duffing oscillator with two states and one input.
#[derive(Debug, Clone)]
pub struct DuffingModel {
    params: DuffingParams,
}

pub fn duffing_model(p: DuffingParams) -> Result<DuffingModel> {
    let finite = [p.tau, p.delta, p.zeta, p.gamma_damp, p.sigma_w]
        .iter()
        .all(|v| v.is_finite());
    if !finite {
        return Err(Error::Config("duffing parameters must be finite".into()));
    }
    if p.tau <= 0.0 {
        return Err(Error::Config(format!(
            "duffing step size tau must be positive, got {}",
            p.tau
        )));
    }
    if p.sigma_w < 0.0 {
        return Err(Error::Config(format!(
            "duffing noise intensity sigma_w must be non-negative, got {}",
            p.sigma_w
        )));
    }
    Ok(DuffingModel { params: p })
}

impl DuffingModel {
    pub fn params(&self) -> &DuffingParams {
        &self.params
    }
}

impl SystemModel for DuffingModel {
    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let p = &self.params;
        let (x1, x2) = (x[0], x[1]);
        DVector::from_vec(vec![
            x1 + p.tau * x2,
            x2 - p.tau * (p.delta * x1 + p.zeta * x1 * x1 * x1 + p.gamma_damp * x2) + p.tau * u[0],
        ])
    }

    fn jacobian_x(&self, x: &DVector<f64>, _u: &DVector<f64>) -> Option<DMatrix<f64>> {
        let p = &self.params;
        let x1 = x[0];
        Some(DMatrix::from_row_slice(
            2,
            2,
            &[
                1.0,
                p.tau,
                -p.tau * (p.delta + 3.0 * p.zeta * x1 * x1),
                1.0 - p.tau * p.gamma_damp,
            ],
        ))
    }

    fn jacobian_u(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_row_slice(2, 1, &[0.0, self.params.tau]))
    }

    fn noise_cov(&self, _t: usize) -> DMatrix<f64> {
        let p = &self.params;
        DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, p.tau * p.sigma_w * p.sigma_w]))
    }
}

/// Time-invariant affine system `f(x, u) = A x + B u + c` with constant noise.
#[derive(Debug, Clone)]
pub struct AffineModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    pub w: DMatrix<f64>,
}

impl AffineModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DVector<f64>, w: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(Error::Dimension(format!(
                "A must be square and non-empty, got {}x{}",
                n,
                a.ncols()
            )));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "B must be {n}xm with m > 0, got {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
        if c.len() != n {
            return Err(Error::Dimension(format!("c must have length {n}, got {}", c.len())));
        }
        if w.nrows() != n || w.ncols() != n {
            return Err(Error::Dimension(format!(
                "W must be {n}x{n}, got {}x{}",
                w.nrows(),
                w.ncols()
            )));
        }
        Ok(Self { a, b, c, w })
    }

    /// Scalar system `x+ = a x + b u + c` with noise variance `w`.
    pub fn scalar(a: f64, b: f64, c: f64, w: f64) -> Self {
        Self {
            a: DMatrix::from_element(1, 1, a),
            b: DMatrix::from_element(1, 1, b),
            c: DVector::from_element(1, c),
            w: DMatrix::from_element(1, 1, w),
        }
    }
}

impl SystemModel for AffineModel {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + &self.c
    }

    fn jacobian_x(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.a.clone())
    }

    fn jacobian_u(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.b.clone())
    }

    fn noise_cov(&self, _t: usize) -> DMatrix<f64> {
        self.w.clone()
    }
}

type DynamicsFn = dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync;
type NoiseFn = dyn Fn(usize) -> DMatrix<f64> + Send + Sync;

/// Closure-backed model for plugging in user dynamics without a new type.
/// Jacobians are obtained by finite differences.
pub struct FnModel {
    n: usize,
    m: usize,
    f: Box<DynamicsFn>,
    noise: Box<NoiseFn>,
}

impl FnModel {
    pub fn new<F, W>(state_dim: usize, input_dim: usize, f: F, noise: W) -> Self
    where
        F: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        W: Fn(usize) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self {
            n: state_dim,
            m: input_dim,
            f: Box::new(f),
            noise: Box::new(noise),
        }
    }
}

impl SystemModel for FnModel {
    fn state_dim(&self) -> usize {
        self.n
    }

    fn input_dim(&self) -> usize {
        self.m
    }

    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (self.f)(x, u)
    }

    fn noise_cov(&self, t: usize) -> DMatrix<f64> {
        (self.noise)(t)
    }
}

impl std::fmt::Debug for FnModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FnModel")
            .field("n", &self.n)
            .field("m", &self.m)
            .finish()
    }
}
