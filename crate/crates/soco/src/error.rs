use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{what} is not finite")]
    NonFinite { what: String },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("matrix is not symmetric (max asymmetry {max_asymmetry:.3e})")]
    NotSymmetric { max_asymmetry: f64 },
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("{what} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },
    #[error(
        "optimal lambda2 = {value:.6e} is negative for lambda1 = {lambda1}, theta = {theta}; \
         lambda1 is below its feasibility threshold"
    )]
    NegativeLambda2 {
        value: f64,
        lambda1: f64,
        theta: f64,
    },
    #[error("offline optimal cost {cost:.3e} is at or below the floor {floor:.3e}")]
    ZeroOptimalCost { cost: f64, floor: f64 },
    #[error("dual bisection failed for switching budget {budget}: {message}")]
    BisectionFailure { budget: f64, message: String },
    #[error("calibrated action at step {step} lies on the action-set boundary; step gradients are undefined there")]
    BoundaryOptimum { step: usize },
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },
    #[error("all {count} instances were excluded by the oracle-cost floor")]
    AllInstancesExcluded { count: usize },
    #[error("instance {id}: cost ratio {ratio} is below 1 beyond solver tolerance; the oracle solution is suspect")]
    RatioBelowOne { ratio: f64, id: String },
    #[error(
        "unit mismatch: mean base shortage {shortage:.3e} MW vs mean renewable supply {renewable:.3e} MW \
         differ by more than 1000x"
    )]
    UnitMismatch { shortage: f64, renewable: f64 },
    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },
    #[error("weights file {path}: {message}")]
    WeightsFormat { path: PathBuf, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn csv(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Csv {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn csv_row(
        path: impl Into<PathBuf>,
        line: usize,
        column: &str,
        message: impl Into<String>,
    ) -> Self {
        Error::Csv {
            path: path.into(),
            message: format!("line {line}, column {column}: {}", message.into()),
        }
    }
}
