//! Stage-wise linearization of the nonlinear dynamics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{check_dims, SystemModel};

/// Goal linearizations whose fixed-point residual exceeds this are reported.
pub const GOAL_RESIDUAL_WARN: f64 = 1e-6;

/// Time-invariant model `z(t+1) = A z(t) + B u(t) + d + w(t)` valid on `[stage, horizon_end]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// `f` evaluated at the linearization point.
    pub r: DVector<f64>,
    /// Affine offset `r - A x_lin - B u_lin`.
    pub d: DVector<f64>,
    pub x_lin: DVector<f64>,
    pub u_lin: DVector<f64>,
    pub stage: usize,
    pub horizon_end: usize,
}

impl LinearModel {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn remaining_horizon(&self) -> usize {
        self.horizon_end - self.stage
    }

    /// `A (x - x_lin) + B (u - u_lin) + r`.
    pub fn eval_deviation(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * (x - &self.x_lin) + &self.b * (u - &self.u_lin) + &self.r
    }

    /// `A x + B u + d`.
    pub fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + &self.d
    }

    /// Same matrices re-labelled for another stage of the same horizon.
    pub fn at_stage(&self, stage: usize) -> Self {
        Self { stage, ..self.clone() }
    }
}

pub fn linearize_at(
    model: &dyn SystemModel,
    x_lin: &DVector<f64>,
    u_lin: &DVector<f64>,
    stage: usize,
    horizon_end: usize,
) -> Result<LinearModel> {
    check_dims(model, x_lin, u_lin)?;
    if stage >= horizon_end {
        return Err(Error::Dimension(format!(
            "linearization stage {stage} must be below the horizon end {horizon_end}"
        )));
    }
    let a = model
        .jacobian_x(x_lin, u_lin)
        .unwrap_or_else(|| fd_jacobian_x(model, x_lin, u_lin));
    let b = model
        .jacobian_u(x_lin, u_lin)
        .unwrap_or_else(|| fd_jacobian_u(model, x_lin, u_lin));
    let (n, m) = (model.state_dim(), model.input_dim());
    if a.shape() != (n, n) || b.shape() != (n, m) {
        return Err(Error::Dimension(format!(
            "model Jacobians have shapes {:?} and {:?}, expected ({n}, {n}) and ({n}, {m})",
            a.shape(),
            b.shape()
        )));
    }
    let r = model.dynamics(x_lin, u_lin);
    if a.iter().chain(b.iter()).chain(r.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Linearization { stage });
    }
    let d = &r - &a * x_lin - &b * u_lin;
    Ok(LinearModel {
        a,
        b,
        r,
        d,
        x_lin: x_lin.clone(),
        u_lin: u_lin.clone(),
        stage,
        horizon_end,
    })
}

/// `‖f(x_goal, u_goal) - x_goal‖₂`.
pub fn fixed_point_residual(model: &dyn SystemModel, x_goal: &DVector<f64>, u_goal: &DVector<f64>) -> Result<f64> {
    check_dims(model, x_goal, u_goal)?;
    Ok((model.dynamics(x_goal, u_goal) - x_goal).norm())
}

/// Linearization at the terminal target. The caller is responsible for
/// supplying an input that makes the target a fixed point; a warning is
/// logged when it does not.
pub fn linearize_at_goal(
    model: &dyn SystemModel,
    x_goal: &DVector<f64>,
    u_goal: &DVector<f64>,
    stage: usize,
    horizon_end: usize,
) -> Result<LinearModel> {
    let residual = fixed_point_residual(model, x_goal, u_goal)?;
    if residual > GOAL_RESIDUAL_WARN {
        log::warn!("goal linearization point is not a fixed point: ‖f(μf, νf) − μf‖ = {residual:e}");
    }
    linearize_at(model, x_goal, u_goal, stage, horizon_end)
}

fn fd_step(v: f64) -> f64 {
    1e-6 * v.abs().max(1.0)
}

pub(crate) fn fd_jacobian_x(model: &dyn SystemModel, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
    let n = x.len();
    let mut jac = DMatrix::zeros(model.state_dim(), n);
    for j in 0..n {
        let h = fd_step(x[j]);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let col = (model.dynamics(&xp, u) - model.dynamics(&xm, u)) / (xp[j] - xm[j]);
        jac.set_column(j, &col);
    }
    jac
}

pub(crate) fn fd_jacobian_u(model: &dyn SystemModel, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
    let m = u.len();
    let mut jac = DMatrix::zeros(model.state_dim(), m);
    for j in 0..m {
        let h = fd_step(u[j]);
        let mut up = u.clone();
        let mut um = u.clone();
        up[j] += h;
        um[j] -= h;
        let col = (model.dynamics(x, &up) - model.dynamics(x, &um)) / (up[j] - um[j]);
        jac.set_column(j, &col);
    }
    jac
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{duffing_model, AffineModel, DuffingParams, FnModel};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn duffing() -> crate::models::DuffingModel {
        duffing_model(DuffingParams::default()).unwrap()
    }

    /// Duffing dynamics without analytic Jacobians.
    fn duffing_fd() -> FnModel {
        let inner = duffing();
        FnModel::new(2, 1, move |x, u| inner.dynamics(x, u), |_| DMatrix::zeros(2, 2))
    }

    #[test]
    fn duffing_at_origin() {
        let lm = linearize_at(&duffing(), &v(&[0.0, 0.0]), &v(&[0.0]), 0, 100).unwrap();
        assert_relative_eq!(
            lm.a,
            DMatrix::from_row_slice(2, 2, &[1.0, 0.01, 0.01, 0.9995]),
            epsilon = 1e-15
        );
        assert_relative_eq!(lm.b, DMatrix::from_row_slice(2, 1, &[0.0, 0.01]), epsilon = 1e-15);
        assert_eq!(lm.r, v(&[0.0, 0.0]));
        assert_eq!(lm.d, v(&[0.0, 0.0]));
    }

    #[test]
    fn duffing_off_origin() {
        let lm = linearize_at(&duffing(), &v(&[1.0, 0.0]), &v(&[0.0]), 3, 100).unwrap();
        assert_relative_eq!(
            lm.a,
            DMatrix::from_row_slice(2, 2, &[1.0, 0.01, 0.0085, 0.9995]),
            epsilon = 1e-15
        );
        assert_relative_eq!(lm.r, v(&[1.0, 0.0095]), epsilon = 1e-15);
        assert_relative_eq!(lm.d, v(&[0.0, 0.001]), epsilon = 1e-15);
        assert_eq!(lm.stage, 3);
    }

    #[test]
    fn affine_system_is_its_own_linearization() {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 1.1]);
        let b = DMatrix::from_row_slice(2, 1, &[0.5, 1.0]);
        let c = v(&[0.3, -0.7]);
        let m = AffineModel::new(a.clone(), b.clone(), c.clone(), DMatrix::zeros(2, 2)).unwrap();
        let lm = linearize_at(&m, &v(&[4.0, -2.0]), &v(&[1.5]), 0, 5).unwrap();
        assert_eq!(lm.a, a);
        assert_eq!(lm.b, b);
        assert_relative_eq!(lm.d, c, epsilon = 1e-14);
    }

    #[test]
    fn stage_must_precede_horizon_end() {
        assert!(linearize_at(&duffing(), &v(&[0.0, 0.0]), &v(&[0.0]), 5, 5).is_err());
    }

    #[test]
    fn non_finite_jacobian_is_an_error() {
        let m = FnModel::new(1, 1, |x, _| x.map(|v| v.sqrt()), |_| DMatrix::zeros(1, 1));
        assert!(matches!(
            linearize_at(&m, &v(&[-1.0]), &v(&[0.0]), 0, 1),
            Err(Error::Linearization { stage: 0 })
        ));
    }

    #[test]
    fn goal_linearization() {
        let at_goal = linearize_at_goal(&duffing(), &v(&[0.0, 0.0]), &v(&[0.0]), 0, 10).unwrap();
        let at_belief = linearize_at(&duffing(), &v(&[0.0, 0.0]), &v(&[0.0]), 0, 10).unwrap();
        assert_eq!(at_goal, at_belief);

        let m = AffineModel::new(
            DMatrix::identity(2, 2) * 0.5,
            DMatrix::identity(2, 2),
            v(&[0.0, 0.0]),
            DMatrix::zeros(2, 2),
        )
        .unwrap();
        let lm = linearize_at_goal(&m, &v(&[0.0, 0.0]), &v(&[0.0, 0.0]), 0, 3).unwrap();
        assert_eq!(lm.d, v(&[0.0, 0.0]));

        let res = fixed_point_residual(&duffing(), &v(&[1.0, 0.0]), &v(&[0.0])).unwrap();
        assert_relative_eq!(res, 0.0095, epsilon = 1e-15);
        assert!(res > GOAL_RESIDUAL_WARN);
    }

    proptest! {
        #[test]
        fn linear_model_reproduces_f_at_the_point(
            x1 in -3.0..3.0f64, x2 in -3.0..3.0f64, u in -5.0..5.0f64
        ) {
            let m = duffing();
            let (x, u) = (v(&[x1, x2]), v(&[u]));
            let lm = linearize_at(&m, &x, &u, 0, 4).unwrap();
            prop_assert_eq!(lm.eval_deviation(&x, &u), lm.r.clone());
            prop_assert!((lm.eval(&x, &u) - m.dynamics(&x, &u)).amax() <= 1e-12);
            prop_assert!((&lm.d - (&lm.r - &lm.a * &x - &lm.b * &u)).amax() <= 1e-12);
        }

        #[test]
        fn finite_difference_path_matches_analytic(
            x1 in -3.0..3.0f64, x2 in -3.0..3.0f64, u in -5.0..5.0f64
        ) {
            let (x, u) = (v(&[x1, x2]), v(&[u]));
            let exact = linearize_at(&duffing(), &x, &u, 0, 4).unwrap();
            let approx = linearize_at(&duffing_fd(), &x, &u, 0, 4).unwrap();
            prop_assert!((&exact.a - &approx.a).amax() / exact.a.amax() <= 1e-5);
            prop_assert!((&exact.b - &approx.b).amax() / exact.b.amax() <= 1e-5);
        }
    }
}
