use thiserror::Error;

use crate::lgcs::SolveStatus;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate covariance: smallest eigenvalue {min_eig:e} is below the floor {floor:e}")]
    DegenerateCovariance { min_eig: f64, floor: f64 },

    #[error("linearization at stage {stage} produced non-finite Jacobian entries")]
    Linearization { stage: usize },

    #[error("sigma point {index} was mapped to a non-finite state")]
    Propagation { index: usize },

    #[error("steering problem at stage {stage} is infeasible: {reason}")]
    Infeasible { stage: usize, reason: String },

    #[error("steering solver at stage {stage} stopped after {iterations} iterations without converging")]
    MaxIter { stage: usize, iterations: usize },

    #[error("cannot extract a control law from a solution with status {0:?}")]
    PolicyExtraction(SolveStatus),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}
