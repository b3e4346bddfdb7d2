//! Greedy covariance steering for discrete-time stochastic nonlinear systems.
//!
//! At every stage the dynamics are linearized at the current belief, a convex
//! linear-Gaussian covariance steering problem is solved over the remaining
//! horizon, only its first affine law is executed, and the next belief is
//! predicted with the scaled unscented transform.

// `!(x > 0.0)` style guards are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod belief;
pub mod cli;
pub mod config;
pub mod error;
pub mod export;
pub mod greedy;
pub mod lgcs;
pub mod lifted;
pub mod linearize;
pub mod models;
pub mod montecarlo;
pub mod unscented;

pub use belief::{EllipseLevelSet, GaussianBelief};
pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use greedy::{greedy_steer, greedy_steer_from, GreedyConfig, GreedyRun, LinearizationMode};
pub use lgcs::{solve_lgcs, SolveStatus, SolverSettings, StageLaw, SteeringSolution};
pub use lifted::{build_lifted, LiftedSystem};
pub use linearize::{linearize_at, linearize_at_goal, LinearModel};
pub use models::{duffing_model, AffineModel, DuffingModel, DuffingParams, SystemModel};
pub use montecarlo::{simulate_closed_loop, McReport, McSettings, NoiseKind};
pub use unscented::{sigma_points, ut_propagate, SigmaSet};
