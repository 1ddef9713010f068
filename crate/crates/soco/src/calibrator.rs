//! Per-step expert calibration.
//!
//! Each step solves
//!
//! ```text
//! x_t = argmin_x f(x, y_t) + l1 c(x, x_prev) + l2 c(x, v_t) + l3 c(x, x_tilde)
//! ```
//!
//! where `v_t` minimizes the current hitting cost and `x_tilde` is the raw ML
//! prediction. With `l3 = 0` this is regularized online balanced descent;
//! with `l1 = 1, l2 = l3 = 0` it is the greedy step; with `l1 = l3 = 1,
//! l2 = 0` it follows the prediction. The step is differentiable through its
//! stationarity condition, which is what [`step_jacobians`] computes.

use crate::cost::{CostModel, HittingCost};
use crate::error::{Error, Result};
use crate::linalg::{add_scaled, norm2, sub, Cholesky, Mat};

const STEP_GRAD_TOL: f64 = 1e-10;
const NEWTON_MAX_ITERS: usize = 100;

/// Calibrator weights. `lambda1` scales the pull toward the previous action,
/// `lambda2` toward the hitting-cost minimizer, `lambda3` toward the ML
/// prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibratorParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl CalibratorParams {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self> {
        if !(lambda1 > 0.0 && lambda1 <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "lambda1 must be in (0, 1], got {lambda1}"
            )));
        }
        if lambda2 < 0.0 || lambda3 < 0.0 || !lambda2.is_finite() || !lambda3.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "lambda2 and lambda3 must be non-negative, got ({lambda2}, {lambda3})"
            )));
        }
        Ok(CalibratorParams {
            lambda1,
            lambda2,
            lambda3,
        })
    }

    /// Trust parameter `lambda3 / lambda1`.
    pub fn theta(&self) -> f64 {
        self.lambda3 / self.lambda1
    }

    pub fn sum(&self) -> f64 {
        self.lambda1 + self.lambda2 + self.lambda3
    }
}

/// Optional per-coordinate box for the action set.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionBounds {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl ActionBounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch {
                context: "action bounds",
                expected: lo.len(),
                actual: hi.len(),
            });
        }
        for (l, h) in lo.iter().zip(&hi) {
            if l > h {
                return Err(Error::InvalidParameter(format!(
                    "bound lo {l} exceeds hi {h}"
                )));
            }
        }
        Ok(ActionBounds { lo, hi })
    }

    pub fn project(&self, x: &mut [f64]) {
        for (v, (l, h)) in x.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *v = v.clamp(*l, *h);
        }
    }

    /// True when x sits strictly inside the box by at least `margin`.
    pub fn is_interior(&self, x: &[f64], margin: f64) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (l, h))| *v > l + margin && *v < h - margin)
    }
}

/// Optimal `lambda2` for given `lambda1` and trust parameter `theta`.
///
/// Errors with [`Error::NegativeLambda2`] when the formula goes negative,
/// which signals that `lambda1` is below its feasibility threshold.
pub fn optimal_lambda2(m: f64, alpha: f64, beta: f64, lambda1: f64, theta: f64) -> Result<f64> {
    if m <= 0.0 || alpha <= 0.0 || beta <= 0.0 {
        return Err(Error::InvalidParameter(
            "m, alpha, beta must be positive".into(),
        ));
    }
    if !(lambda1 > 0.0 && lambda1 <= 1.0) || theta < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "need lambda1 in (0, 1] and theta >= 0, got ({lambda1}, {theta})"
        )));
    }
    let ratio = beta / m * theta;
    let root = ((1.0 + ratio) * (1.0 + ratio) + 4.0 * beta * beta / (alpha * m)).sqrt();
    let value = m * lambda1 / (2.0 * beta) * (root + 1.0 - 2.0 / lambda1 - ratio);
    if value < -1e-12 {
        return Err(Error::NegativeLambda2 {
            value,
            lambda1,
            theta,
        });
    }
    Ok(value.max(0.0))
}

/// Minimizer of the current hitting cost, `v_t = argmin_x f(x, y_t)`.
pub fn hitting_minimizer(model: &CostModel, y: &[f64]) -> Result<Vec<f64>> {
    match model.hitting() {
        HittingCost::QuadraticTracking => {
            if y.len() != model.dim() {
                return Err(Error::DimensionMismatch {
                    context: "hitting minimizer context",
                    expected: model.dim(),
                    actual: y.len(),
                });
            }
            Ok(y.to_vec())
        }
        HittingCost::Custom { .. } => {
            let mut x = if y.len() == model.dim() {
                y.to_vec()
            } else {
                vec![0.0; model.dim()]
            };
            for iter in 0..NEWTON_MAX_ITERS {
                let g = model.hitting_grad(&x, y)?;
                let gn = norm2(&g);
                if gn <= STEP_GRAD_TOL {
                    return Ok(x);
                }
                let h = model.hitting_hessian(&x, y)?;
                let step = Cholesky::factor(&h)?.solve_vec(&g);
                let mut scale = 1.0;
                loop {
                    let mut cand = x.clone();
                    add_scaled(&mut cand, -scale, &step);
                    let cand_gn = norm2(&model.hitting_grad(&cand, y)?);
                    if cand_gn < gn || scale < 1e-8 {
                        x = cand;
                        break;
                    }
                    scale *= 0.5;
                }
                let _ = iter;
            }
            let residual = norm2(&model.hitting_grad(&x, y)?);
            if residual <= STEP_GRAD_TOL {
                Ok(x)
            } else {
                Err(Error::NonConvergence {
                    what: "hitting minimizer Newton",
                    iterations: NEWTON_MAX_ITERS,
                    residual,
                })
            }
        }
    }
}

/// One calibration step.
///
/// For the quadratic tracking cost this is the exact linear solve
/// `(I + 2(l1+l2+l3) Q) x = y + 2 Q (l1 x_prev + l2 v + l3 x_tilde)`.
/// Custom hitting costs go through damped Newton, and a box constraint
/// switches to projected gradient with the same tolerance.
pub fn calibrate_step(
    model: &CostModel,
    params: &CalibratorParams,
    y: &[f64],
    x_prev: &[f64],
    x_tilde: &[f64],
    bounds: Option<&ActionBounds>,
) -> Result<Vec<f64>> {
    let d = model.dim();
    for (name, v) in [("x_prev", x_prev), ("x_tilde", x_tilde)] {
        if v.len() != d {
            return Err(Error::DimensionMismatch {
                context: match name {
                    "x_prev" => "calibrate_step x_prev",
                    _ => "calibrate_step x_tilde",
                },
                expected: d,
                actual: v.len(),
            });
        }
    }
    let v = hitting_minimizer(model, y)?;

    // anchor = l1 x_prev + l2 v + l3 x_tilde
    let mut anchor = vec![0.0; d];
    add_scaled(&mut anchor, params.lambda1, x_prev);
    add_scaled(&mut anchor, params.lambda2, &v);
    add_scaled(&mut anchor, params.lambda3, x_tilde);

    if let Some(b) = bounds {
        return solve_projected(model, params, y, &anchor, x_prev, b);
    }

    match model.hitting() {
        HittingCost::QuadraticTracking => {
            let q = model.switching().q();
            let a = Mat::identity(d).add(&q.scaled(2.0 * params.sum()));
            let mut rhs = y.to_vec();
            let qa = q.mul_vec(&anchor);
            add_scaled(&mut rhs, 2.0, &qa);
            Ok(Cholesky::factor(&a)?.solve_vec(&rhs))
        }
        HittingCost::Custom { .. } => solve_newton(model, params, y, &anchor, x_prev),
    }
}

/// Gradient of the per-step objective at `x`.
fn objective_grad(
    model: &CostModel,
    params: &CalibratorParams,
    y: &[f64],
    anchor: &[f64],
    x: &[f64],
) -> Result<Vec<f64>> {
    // grad = grad_f + 2 Q (sum * x - anchor)
    let mut combo = x.to_vec();
    for v in combo.iter_mut() {
        *v *= params.sum();
    }
    add_scaled(&mut combo, -1.0, anchor);
    let mut g = model.hitting_grad(x, y)?;
    let qc = model.switching().q().mul_vec(&combo);
    add_scaled(&mut g, 2.0, &qc);
    Ok(g)
}

fn objective_hessian(
    model: &CostModel,
    params: &CalibratorParams,
    y: &[f64],
    x: &[f64],
) -> Result<Mat> {
    Ok(model
        .hitting_hessian(x, y)?
        .add(&model.switching().q().scaled(2.0 * params.sum())))
}

fn solve_newton(
    model: &CostModel,
    params: &CalibratorParams,
    y: &[f64],
    anchor: &[f64],
    x_prev: &[f64],
) -> Result<Vec<f64>> {
    let mut x = x_prev.to_vec();
    for _ in 0..NEWTON_MAX_ITERS {
        let g = objective_grad(model, params, y, anchor, &x)?;
        let gn = norm2(&g);
        if gn <= STEP_GRAD_TOL {
            return Ok(x);
        }
        let h = objective_hessian(model, params, y, &x)?;
        let step = Cholesky::factor(&h)?.solve_vec(&g);
        let mut scale = 1.0;
        loop {
            let mut cand = x.clone();
            add_scaled(&mut cand, -scale, &step);
            let cand_gn = norm2(&objective_grad(model, params, y, anchor, &cand)?);
            if cand_gn < gn || scale < 1e-8 {
                x = cand;
                break;
            }
            scale *= 0.5;
        }
    }
    let residual = norm2(&objective_grad(model, params, y, anchor, &x)?);
    if residual <= STEP_GRAD_TOL {
        Ok(x)
    } else {
        Err(Error::NonConvergence {
            what: "calibrate_step Newton",
            iterations: NEWTON_MAX_ITERS,
            residual,
        })
    }
}

fn solve_projected(
    model: &CostModel,
    params: &CalibratorParams,
    y: &[f64],
    anchor: &[f64],
    x_prev: &[f64],
    bounds: &ActionBounds,
) -> Result<Vec<f64>> {
    let mut x = x_prev.to_vec();
    bounds.project(&mut x);
    let max_iters = 200_000;
    for iter in 0..max_iters {
        let h = objective_hessian(model, params, y, &x)?;
        let lipschitz = crate::linalg::sym_eigenvalues(&h)?
            .last()
            .copied()
            .unwrap_or(1.0)
            .max(1e-12);
        let step = 1.0 / lipschitz;
        let g = objective_grad(model, params, y, anchor, &x)?;
        let mut next = x.clone();
        add_scaled(&mut next, -step, &g);
        bounds.project(&mut next);
        let residual = norm2(&sub(&x, &next)) / step;
        x = next;
        if residual <= STEP_GRAD_TOL * 10.0 {
            return Ok(x);
        }
        if iter == max_iters - 1 {
            return Err(Error::NonConvergence {
                what: "calibrate_step projected gradient",
                iterations: max_iters,
                residual,
            });
        }
    }
    unreachable!()
}

/// Jacobians of the calibrated action at an unconstrained optimum.
///
/// With `Z = hess_f(x_t, y_t) + 2 (l1+l2+l3) Q`, the step output moves as
/// `d x_t / d x_tilde = 2 l3 Z^{-1} Q` and `d x_t / d x_prev = 2 l1 Z^{-1} Q`.
#[derive(Debug, Clone)]
pub struct StepJacobians {
    pub wrt_prediction: Mat,
    pub wrt_prev: Mat,
}

pub fn step_jacobians(
    model: &CostModel,
    params: &CalibratorParams,
    y: &[f64],
    x_t: &[f64],
) -> Result<StepJacobians> {
    let z = objective_hessian(model, params, y, x_t)?;
    let chol = Cholesky::factor(&z)?;
    let q = model.switching().q();
    let wrt_prediction = chol.solve_mat(&q.scaled(2.0 * params.lambda3));
    let wrt_prev = chol.solve_mat(&q.scaled(2.0 * params.lambda1));
    Ok(StepJacobians {
        wrt_prediction,
        wrt_prev,
    })
}

/// Residual of the first-order condition at `x`; near zero at an
/// unconstrained optimum.
pub fn stationarity_residual(
    model: &CostModel,
    params: &CalibratorParams,
    y: &[f64],
    x_prev: &[f64],
    x_tilde: &[f64],
    x: &[f64],
) -> Result<f64> {
    let v = hitting_minimizer(model, y)?;
    let mut anchor = vec![0.0; model.dim()];
    add_scaled(&mut anchor, params.lambda1, x_prev);
    add_scaled(&mut anchor, params.lambda2, &v);
    add_scaled(&mut anchor, params.lambda3, x_tilde);
    Ok(norm2(&objective_grad(model, params, y, &anchor, x)?))
}
