use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by model construction, solvers, flows and the experiment runner.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A model invariant was violated; `location` names the offending index.
    #[error("invariant violated: {invariant} at {location}")]
    Invariant { invariant: String, location: String },

    #[error("policy assigns zero mass to action {action} in state {state} where the reference measure is positive")]
    Domain { state: usize, action: usize },

    #[error("KL divergence is infinite: q({action}|{state}) = 0 while p({action}|{state}) > 0")]
    InfiniteDivergence { state: usize, action: usize },

    #[error("concentrability coefficient is infinite: zero reference mass at {location}")]
    InfiniteConcentrability { location: String },

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    ConvergenceFailure { iterations: usize, residual: f64 },

    #[error("integrator instability at t = {t}: {detail}; try a smaller dt")]
    IntegratorInstability { t: f64, detail: String },

    #[error("internal solver error: {0}")]
    Internal(String),

    #[error("configuration error in {path}: {detail}")]
    Config { path: PathBuf, detail: String },

    #[error("tolerance override rejected: {0}")]
    Tolerance(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invariant(invariant: impl Into<String>, location: impl Into<String>) -> Self {
        Error::Invariant {
            invariant: invariant.into(),
            location: location.into(),
        }
    }
}
