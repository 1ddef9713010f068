//! Hitting and switching cost functions together with their convexity
//! constants.
//!
//! The switching cost is a squared Mahalanobis distance
//! `c(x, x') = (x - x')^T Q (x - x')` for a symmetric positive-definite `Q`.
//! We keep `alpha = 2 min_eig(Q)` and `beta = 2 max_eig(Q)` around because the
//! bound calculators need them as inputs.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sub, sym_eigenvalues, Mat};

/// `(alpha, beta) = (2 min_eig, 2 max_eig)` of a symmetric PD matrix.
pub fn eig_bounds(q: &Mat) -> Result<(f64, f64)> {
    let asym = q.max_asymmetry();
    if asym > 1e-12 {
        return Err(Error::NotSymmetric {
            max_asymmetry: asym,
        });
    }
    let eig = sym_eigenvalues(q)?;
    let min = eig[0];
    let max = *eig.last().unwrap();
    if min <= 0.0 {
        return Err(Error::NotPositiveDefinite);
    }
    Ok((2.0 * min, 2.0 * max))
}

#[derive(Debug, Clone)]
pub struct SwitchingCost {
    q: Mat,
    alpha: f64,
    beta: f64,
}

impl SwitchingCost {
    pub fn new(q: Mat) -> Result<Self> {
        let (alpha, beta) = eig_bounds(&q)?;
        Ok(SwitchingCost { q, alpha, beta })
    }

    /// Q = sigma * I.
    pub fn isotropic(dim: usize, sigma: f64) -> Result<Self> {
        if sigma <= 0.0 || !sigma.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "switching scale must be positive, got {sigma}"
            )));
        }
        Self::new(Mat::scaled_identity(dim, sigma))
    }

    pub fn q(&self) -> &Mat {
        &self.q
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn dim(&self) -> usize {
        self.q.rows()
    }

    pub fn cost(&self, x: &[f64], x_prev: &[f64]) -> Result<f64> {
        self.check_dim(x.len())?;
        self.check_dim(x_prev.len())?;
        Ok(self.q.quad_form(&sub(x, x_prev)).max(0.0))
    }

    /// d/dx (x - x')^T Q (x - x') = 2 Q (x - x')
    pub fn grad_x(&self, x: &[f64], x_prev: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        self.check_dim(x_prev.len())?;
        Ok(self.q.mul_vec(&sub(x, x_prev)).iter().map(|v| 2.0 * v).collect())
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        if n != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "switching cost",
                expected: self.dim(),
                actual: n,
            });
        }
        Ok(())
    }
}

pub type ValueFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
pub type GradFn = Arc<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;
pub type HessianFn = Arc<dyn Fn(&[f64], &[f64]) -> Mat + Send + Sync>;

/// Hitting cost family. `QuadraticTracking` is `f(x, y) = 1/2 ||x - y||^2`
/// with strong-convexity constant `m = 1`. Custom costs supply callbacks plus
/// a declared `m`, which is validated probabilistically rather than proven.
#[derive(Clone)]
pub enum HittingCost {
    QuadraticTracking,
    Custom {
        m: f64,
        value: ValueFn,
        grad: GradFn,
        hessian: HessianFn,
    },
}

impl fmt::Debug for HittingCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HittingCost::QuadraticTracking => write!(f, "QuadraticTracking"),
            HittingCost::Custom { m, .. } => write!(f, "Custom {{ m: {m} }}"),
        }
    }
}

impl HittingCost {
    pub fn custom(m: f64, value: ValueFn, grad: GradFn, hessian: HessianFn) -> Result<Self> {
        if m <= 0.0 || !m.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "strong-convexity constant must be positive, got {m}"
            )));
        }
        Ok(HittingCost::Custom {
            m,
            value,
            grad,
            hessian,
        })
    }

    pub fn strong_convexity(&self) -> f64 {
        match self {
            HittingCost::QuadraticTracking => 1.0,
            HittingCost::Custom { m, .. } => *m,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CostModel {
    hitting: HittingCost,
    switching: SwitchingCost,
}

impl CostModel {
    pub fn new(hitting: HittingCost, switching: SwitchingCost) -> Self {
        CostModel { hitting, switching }
    }

    pub fn quadratic_tracking(switching: SwitchingCost) -> Self {
        CostModel {
            hitting: HittingCost::QuadraticTracking,
            switching,
        }
    }

    /// Quadratic tracking hitting cost with `c(x, x') = (alpha/2) ||x - x'||^2`,
    /// i.e. Q = (alpha/2) I.
    pub fn tracking_with_alpha(dim: usize, alpha: f64) -> Result<Self> {
        Ok(Self::quadratic_tracking(SwitchingCost::isotropic(
            dim,
            alpha / 2.0,
        )?))
    }

    pub fn hitting(&self) -> &HittingCost {
        &self.hitting
    }

    pub fn switching(&self) -> &SwitchingCost {
        &self.switching
    }

    pub fn dim(&self) -> usize {
        self.switching.dim()
    }

    pub fn m(&self) -> f64 {
        self.hitting.strong_convexity()
    }

    pub fn alpha(&self) -> f64 {
        self.switching.alpha()
    }

    pub fn beta(&self) -> f64 {
        self.switching.beta()
    }

    pub fn switching_cost(&self, x: &[f64], x_prev: &[f64]) -> Result<f64> {
        self.switching.cost(x, x_prev)
    }

    pub fn hitting_cost(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check_action(x)?;
        match &self.hitting {
            HittingCost::QuadraticTracking => {
                self.check_tracking_context(y)?;
                Ok(0.5 * x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            }
            HittingCost::Custom { value, .. } => Ok(value(x, y)),
        }
    }

    pub fn hitting_grad(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        self.check_action(x)?;
        match &self.hitting {
            HittingCost::QuadraticTracking => {
                self.check_tracking_context(y)?;
                Ok(sub(x, y))
            }
            HittingCost::Custom { grad, .. } => Ok(grad(x, y)),
        }
    }

    pub fn hitting_hessian(&self, x: &[f64], y: &[f64]) -> Result<Mat> {
        self.check_action(x)?;
        match &self.hitting {
            HittingCost::QuadraticTracking => {
                self.check_tracking_context(y)?;
                Ok(Mat::identity(x.len()))
            }
            HittingCost::Custom { hessian, .. } => Ok(hessian(x, y)),
        }
    }

    fn check_action(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "hitting cost action",
                expected: self.dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn check_tracking_context(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "quadratic tracking context",
                expected: self.dim(),
                actual: y.len(),
            });
        }
        Ok(())
    }
}

/// JSON-facing cost model description.
///
/// ```json
/// {"hitting": {"kind": "quadratic_tracking"}, "switching": {"q_scalar": 5.0}}
/// ```
/// or with explicit rows: `{"switching": {"q_rows": [[5.0]]}}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostModelConfig {
    pub hitting: HittingConfig,
    pub switching: SwitchingConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HittingConfig {
    pub kind: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SwitchingConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_scalar: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_rows: Option<Vec<Vec<f64>>>,
}

impl CostModelConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn build(&self, dim: usize) -> Result<CostModel> {
        if self.hitting.kind != "quadratic_tracking" {
            return Err(Error::Config(format!(
                "unsupported hitting kind {:?}; custom costs are constructed programmatically",
                self.hitting.kind
            )));
        }
        let switching = match (&self.switching.q_scalar, &self.switching.q_rows) {
            (Some(sigma), None) => SwitchingCost::isotropic(dim, *sigma)?,
            (None, Some(rows)) => {
                let q = Mat::from_rows(rows)?;
                if q.rows() != dim {
                    return Err(Error::DimensionMismatch {
                        context: "switching config q_rows",
                        expected: dim,
                        actual: q.rows(),
                    });
                }
                SwitchingCost::new(q)?
            }
            _ => {
                return Err(Error::Config(
                    "switching config needs exactly one of q_scalar or q_rows".into(),
                ))
            }
        };
        Ok(CostModel::quadratic_tracking(switching))
    }
}
