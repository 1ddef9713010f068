//! Offline oracles and prediction-quality measures.
//!
//! The offline optimum of an episode couples all actions through the
//! switching cost, so the stationarity system is block tridiagonal. We solve
//! it directly (exact for quadratic tracking, Newton otherwise): the oracle
//! is the denominator of every ratio metric, so it has to be trustworthy.

use crate::cost::{CostModel, HittingCost};
use crate::error::{Error, Result};
use crate::linalg::{add_scaled, solve_block_tridiagonal, squared_distance, Mat};
use crate::types::ProblemInstance;

const ORACLE_GRAD_TOL: f64 = 1e-8;

/// Joint minimizer of the episode cost.
#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub actions: Vec<Vec<f64>>,
    pub cost: f64,
    /// Norm of the stationarity residual over the whole trajectory.
    pub grad_norm: f64,
}

/// Minimizer subject to a total switching-cost budget.
#[derive(Debug, Clone)]
pub struct LConstrainedSolution {
    pub actions: Vec<Vec<f64>>,
    pub cost: f64,
    pub switching_total: f64,
    /// Dual variable of the budget constraint; infinite for a zero budget,
    /// where no finite multiplier exists.
    pub dual_mu: f64,
}

fn check_instance(instance: &ProblemInstance, model: &CostModel) -> Result<()> {
    if instance.action_dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            context: "oracle instance action dim",
            expected: model.dim(),
            actual: instance.action_dim(),
        });
    }
    Ok(())
}

/// Episode cost of a trajectory with the switching term scaled by `weight`.
fn weighted_cost(
    instance: &ProblemInstance,
    model: &CostModel,
    actions: &[Vec<f64>],
    weight: f64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut prev = instance.x0.as_slice();
    for (t, x) in actions.iter().enumerate() {
        total += model.hitting_cost(x, &instance.contexts[t])?;
        total += weight * model.switching_cost(x, prev)?;
        prev = x;
    }
    Ok(total)
}

fn switching_total(
    instance: &ProblemInstance,
    model: &CostModel,
    actions: &[Vec<f64>],
) -> Result<f64> {
    let mut total = 0.0;
    let mut prev = instance.x0.as_slice();
    for x in actions {
        total += model.switching_cost(x, prev)?;
        prev = x;
    }
    Ok(total)
}

/// Stationarity residual of sum_t f(x_t, y_t) + weight * c(x_t, x_{t-1}).
fn trajectory_grad(
    instance: &ProblemInstance,
    model: &CostModel,
    actions: &[Vec<f64>],
    weight: f64,
) -> Result<Vec<Vec<f64>>> {
    let t_len = instance.horizon();
    let q = model.switching().q();
    let mut grads = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut g = model.hitting_grad(&actions[t], &instance.contexts[t])?;
        let prev = if t == 0 {
            instance.x0.as_slice()
        } else {
            actions[t - 1].as_slice()
        };
        let diff: Vec<f64> = actions[t].iter().zip(prev).map(|(a, p)| a - p).collect();
        add_scaled(&mut g, 2.0 * weight, &q.mul_vec(&diff));
        if t + 1 < t_len {
            let diff_next: Vec<f64> = actions[t + 1]
                .iter()
                .zip(&actions[t])
                .map(|(n, a)| n - a)
                .collect();
            add_scaled(&mut g, -2.0 * weight, &q.mul_vec(&diff_next));
        }
        grads.push(g);
    }
    Ok(grads)
}

fn grad_norm(grads: &[Vec<f64>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Magnitude of the data so residual tolerances can be scale-relative; the
/// direct solve is backward stable, so its absolute residual grows with the
/// problem's values.
fn problem_scale(instance: &ProblemInstance, actions: &[Vec<f64>]) -> f64 {
    let mut scale: f64 = 1.0;
    for v in instance.x0.iter().chain(instance.contexts.iter().flatten()) {
        scale = scale.max(v.abs());
    }
    for v in actions.iter().flatten() {
        scale = scale.max(v.abs());
    }
    scale
}

/// Solve min_x sum_t f(x_t, y_t) + weight * c(x_t, x_{t-1}).
fn solve_weighted(
    instance: &ProblemInstance,
    model: &CostModel,
    weight: f64,
) -> Result<(Vec<Vec<f64>>, f64)> {
    let t_len = instance.horizon();
    let d = model.dim();
    let q = model.switching().q();
    let off = q.scaled(-2.0 * weight);

    match model.hitting() {
        HittingCost::QuadraticTracking => {
            let mut diag = Vec::with_capacity(t_len);
            let mut rhs = Vec::with_capacity(t_len);
            for t in 0..t_len {
                let multiplier = if t + 1 < t_len { 4.0 } else { 2.0 };
                diag.push(Mat::identity(d).add(&q.scaled(multiplier * weight)));
                let mut b = instance.contexts[t].clone();
                if t == 0 {
                    add_scaled(&mut b, 2.0 * weight, &q.mul_vec(&instance.x0));
                }
                rhs.push(b);
            }
            let actions = solve_block_tridiagonal(&diag, &off, &rhs)?;
            let gn = grad_norm(&trajectory_grad(instance, model, &actions, weight)?);
            Ok((actions, gn))
        }
        HittingCost::Custom { .. } => {
            // full-trajectory Newton; the Hessian keeps the same banded shape
            let mut actions: Vec<Vec<f64>> = if instance.context_dim() == d {
                instance.contexts.clone()
            } else {
                vec![instance.x0.clone(); t_len]
            };
            let max_iters = 100;
            for _ in 0..max_iters {
                let grads = trajectory_grad(instance, model, &actions, weight)?;
                let gn = grad_norm(&grads);
                if gn <= ORACLE_GRAD_TOL * problem_scale(instance, &actions) {
                    return Ok((actions, gn));
                }
                let mut diag = Vec::with_capacity(t_len);
                for t in 0..t_len {
                    let multiplier = if t + 1 < t_len { 4.0 } else { 2.0 };
                    diag.push(
                        model
                            .hitting_hessian(&actions[t], &instance.contexts[t])?
                            .add(&q.scaled(multiplier * weight)),
                    );
                }
                let neg: Vec<Vec<f64>> = grads
                    .iter()
                    .map(|g| g.iter().map(|v| -v).collect())
                    .collect();
                let step = solve_block_tridiagonal(&diag, &off, &neg)?;
                let current = weighted_cost(instance, model, &actions, weight)?;
                let mut scale = 1.0;
                loop {
                    let cand: Vec<Vec<f64>> = actions
                        .iter()
                        .zip(&step)
                        .map(|(x, s)| x.iter().zip(s).map(|(a, b)| a + scale * b).collect())
                        .collect();
                    let cand_cost = weighted_cost(instance, model, &cand, weight)?;
                    if cand_cost <= current + 1e-15 || scale < 1e-8 {
                        actions = cand;
                        break;
                    }
                    scale *= 0.5;
                }
            }
            let gn = grad_norm(&trajectory_grad(instance, model, &actions, weight)?);
            if gn <= ORACLE_GRAD_TOL * problem_scale(instance, &actions) {
                Ok((actions, gn))
            } else {
                Err(Error::NonConvergence {
                    what: "offline oracle Newton",
                    iterations: max_iters,
                    residual: gn,
                })
            }
        }
    }
}

/// Offline optimal oracle over the full episode.
pub fn offline_optimal(instance: &ProblemInstance, model: &CostModel) -> Result<OracleSolution> {
    check_instance(instance, model)?;
    let (actions, gn) = solve_weighted(instance, model, 1.0)?;
    if gn > ORACLE_GRAD_TOL * problem_scale(instance, &actions) {
        return Err(Error::NonConvergence {
            what: "offline oracle residual",
            iterations: 1,
            residual: gn,
        });
    }
    let cost = weighted_cost(instance, model, &actions, 1.0)?;
    Ok(OracleSolution {
        actions,
        cost,
        grad_norm: gn,
    })
}

/// Offline optimum subject to `sum_t c(x_t, x_{t-1}) <= budget`.
///
/// If the unconstrained optimum already fits the budget it is returned with
/// `mu = 0`. Otherwise we bisect the dual variable `mu >= 0`: each inner
/// problem minimizes `sum f + (1 + mu) sum c` with the same banded solve, and
/// the switching total is monotone non-increasing in `mu`.
pub fn l_constrained_optimal(
    instance: &ProblemInstance,
    model: &CostModel,
    budget: f64,
) -> Result<LConstrainedSolution> {
    check_instance(instance, model)?;
    if budget.is_nan() || budget < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "switching budget must be >= 0, got {budget}"
        )));
    }

    let (actions, _) = solve_weighted(instance, model, 1.0)?;
    let unconstrained_switching = switching_total(instance, model, &actions)?;
    if unconstrained_switching <= budget + 1e-8 {
        let cost = weighted_cost(instance, model, &actions, 1.0)?;
        return Ok(LConstrainedSolution {
            actions,
            cost,
            switching_total: unconstrained_switching,
            dual_mu: 0.0,
        });
    }

    if budget <= 1e-12 {
        // Q is positive definite, so a zero budget pins every action at x0.
        // The constraint gradient vanishes there and no finite multiplier
        // satisfies the stationarity condition.
        let pinned = vec![instance.x0.clone(); instance.horizon()];
        let cost = weighted_cost(instance, model, &pinned, 1.0)?;
        return Ok(LConstrainedSolution {
            actions: pinned,
            cost,
            switching_total: 0.0,
            dual_mu: f64::INFINITY,
        });
    }

    let solve_mu = |mu: f64| -> Result<(Vec<Vec<f64>>, f64)> {
        let (acts, _) = solve_weighted(instance, model, 1.0 + mu)?;
        let swc = switching_total(instance, model, &acts)?;
        Ok((acts, swc))
    };

    // bracket: switching total at mu_hi must drop to the budget
    let mut mu_hi = 1.0;
    let mut hi_swc;
    loop {
        let (_, swc) = solve_mu(mu_hi)?;
        hi_swc = swc;
        if hi_swc <= budget {
            break;
        }
        mu_hi *= 2.0;
        if mu_hi > 1e18 {
            return Err(Error::BisectionFailure {
                budget,
                message: format!("switching total still {hi_swc:.3e} at mu = {mu_hi:.3e}"),
            });
        }
    }

    let tol = 1e-6 * budget.max(1.0);
    let mut lo = 0.0;
    let mut hi = mu_hi;
    let mut best: Option<(f64, Vec<Vec<f64>>, f64)> = None;
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        let (acts, swc) = solve_mu(mid)?;
        let gap = swc - budget;
        // accept only feasible iterates so the budget invariant survives the
        // final check
        if gap <= 1e-8 && gap.abs() <= tol && (mid * gap.abs()) <= 1e-6 {
            best = Some((mid, acts, swc));
            break;
        }
        if gap > 0.0 {
            lo = mid;
        } else {
            // keep the feasible side as the candidate answer
            best = Some((mid, acts, swc));
            hi = mid;
        }
        if (hi - lo) <= f64::EPSILON * hi.max(1.0) {
            break;
        }
    }
    let (mu, acts, swc) = best.ok_or_else(|| Error::BisectionFailure {
        budget,
        message: "no feasible dual iterate found".into(),
    })?;
    if swc > budget + 1e-8 || (swc - budget).abs() > tol || mu * (swc - budget).abs() > 1e-6 {
        return Err(Error::BisectionFailure {
            budget,
            message: format!(
                "bisection stalled: switching total {swc:.9e} vs budget {budget:.9e} at mu {mu:.6e}"
            ),
        });
    }
    let cost = weighted_cost(instance, model, &acts, 1.0)?;
    Ok(LConstrainedSolution {
        actions: acts,
        cost,
        switching_total: swc,
        dual_mu: mu,
    })
}

/// Smallest `rho` making the prediction sequence rho-accurate:
/// `sum_t ||x_tilde_t - x*_t||^2 / cost(oracle)`.
pub fn prediction_error_rho(
    predictions: &[Vec<f64>],
    oracle: &OracleSolution,
    cost_floor: f64,
) -> Result<f64> {
    if predictions.len() != oracle.actions.len() {
        return Err(Error::DimensionMismatch {
            context: "prediction_error_rho length",
            expected: oracle.actions.len(),
            actual: predictions.len(),
        });
    }
    if oracle.cost <= cost_floor {
        return Err(Error::ZeroOptimalCost {
            cost: oracle.cost,
            floor: cost_floor,
        });
    }
    let sum: f64 = predictions
        .iter()
        .zip(&oracle.actions)
        .map(|(p, a)| squared_distance(p, a))
        .sum();
    Ok(sum / oracle.cost)
}

/// Absolute squared prediction error against the L-constrained oracle.
pub fn l_rho(predictions: &[Vec<f64>], solution: &LConstrainedSolution) -> Result<f64> {
    if predictions.len() != solution.actions.len() {
        return Err(Error::DimensionMismatch {
            context: "l_rho length",
            expected: solution.actions.len(),
            actual: predictions.len(),
        });
    }
    Ok(predictions
        .iter()
        .zip(&solution.actions)
        .map(|(p, a)| squared_distance(p, a))
        .sum())
}
