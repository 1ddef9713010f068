//! Closed-form competitive-ratio and regret bounds, plus the adversarial
//! prediction constructor that realizes the pure-ML lower bound.

use crate::cost::CostModel;
use crate::error::{Error, Result};
use crate::linalg::norm2;
use crate::oracle::OracleSolution;
use crate::types::ProblemInstance;

/// Inputs for the calibrated competitive-ratio upper bound.
#[derive(Debug, Clone, Copy)]
pub struct BoundInputs {
    pub m: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub rho: f64,
}

impl BoundInputs {
    pub fn theta(&self) -> f64 {
        self.lambda3 / self.lambda1
    }
}

/// Inputs for the L-constrained regret upper bound.
#[derive(Debug, Clone, Copy)]
pub struct RegretBoundInputs {
    /// Bound on ||Q x|| over the actions played.
    pub g: f64,
    /// Action-set diameter.
    pub omega: f64,
    pub horizon: usize,
    /// Switching budget L of the constrained oracle.
    pub budget: f64,
    /// Squared prediction error against the L-constrained oracle.
    pub l_rho: f64,
    pub m: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Whether the algorithm's own switching total stayed within the budget.
    pub budget_satisfied: bool,
}

/// Lower bound on the cost ratio of raw rho-accurate predictions:
/// `1 + (m + 2 alpha) rho / 2`.
pub fn cr_lower_pure_ml(m: f64, alpha: f64, rho: f64) -> f64 {
    1.0 + 0.5 * (m + 2.0 * alpha) * rho
}

/// Competitive-ratio upper bound of the calibrated step for arbitrary
/// weights:
/// `max((m + l2 b) / (m l1), 1 + (b^2/a) l1 / ((l2 + l3) b + m)) + (l3 b / 2 l1) rho`.
pub fn cr_upper_mla_robd(inputs: &BoundInputs) -> f64 {
    let BoundInputs {
        m,
        alpha,
        beta,
        lambda1,
        lambda2,
        lambda3,
        rho,
    } = *inputs;
    let first = (m + lambda2 * beta) / (m * lambda1);
    let second = 1.0 + beta * beta / alpha * lambda1 / ((lambda2 + lambda3) * beta + m);
    first.max(second) + lambda3 * beta / (2.0 * lambda1) * rho
}

/// Upper bound at the optimal `lambda2`, a function of the trust parameter
/// only:
/// `1 + [sqrt((1 + (b/m) th)^2 + 4 b^2/(m a)) - (1 + (b/m) th)] / 2 + (b/2) th rho`.
pub fn cr_upper_optimal(m: f64, alpha: f64, beta: f64, theta: f64, rho: f64) -> f64 {
    let ratio = 1.0 + beta / m * theta;
    let root = (ratio * ratio + 4.0 * beta * beta / (m * alpha)).sqrt();
    1.0 + 0.5 * (root - ratio) + 0.5 * beta * theta * rho
}

/// L-constrained regret upper bound. The tighter branch requires
/// `lambda3 < alpha / beta` together with a budget-satisfying trajectory;
/// otherwise the unconditional branch applies.
pub fn regret_upper(inputs: &RegretBoundInputs) -> Result<f64> {
    let RegretBoundInputs {
        g,
        omega,
        horizon,
        budget,
        l_rho,
        m,
        alpha,
        beta,
        lambda1,
        lambda2,
        lambda3,
        budget_satisfied,
    } = *inputs;
    if lambda1 < 1.0 - m / (4.0 * beta) {
        return Err(Error::InvalidParameter(format!(
            "regret bound needs lambda1 >= 1 - m/(4 beta) = {}, got {lambda1}",
            1.0 - m / (4.0 * beta)
        )));
    }
    if budget < 0.0 || g < 0.0 || omega < 0.0 || l_rho < 0.0 {
        return Err(Error::InvalidParameter(
            "regret bound inputs must be non-negative".into(),
        ));
    }
    let t = horizon as f64;
    let movement = (lambda1 + m / (2.0 * beta)) * g * (2.0 * t * budget / alpha).sqrt();
    if lambda3 < alpha / beta && budget_satisfied {
        let factor = alpha / (alpha - lambda3 * beta);
        Ok(factor * (movement + lambda2 * beta * t * omega * omega / 2.0 + lambda3 * beta / 2.0 * l_rho))
    } else {
        Ok(movement + (lambda2 + lambda3) * beta * t * omega * omega / 2.0)
    }
}

/// Predictions that pin the pure-ML lower bound: the oracle sequence with the
/// first action displaced so that the squared error is exactly
/// `rho * cost(oracle)`.
pub fn adversarial_prediction(
    instance: &ProblemInstance,
    model: &CostModel,
    oracle: &OracleSolution,
    rho: f64,
    direction: Option<&[f64]>,
) -> Result<Vec<Vec<f64>>> {
    if rho < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "rho must be >= 0, got {rho}"
        )));
    }
    if oracle.cost <= 0.0 {
        return Err(Error::ZeroOptimalCost {
            cost: oracle.cost,
            floor: 0.0,
        });
    }
    let d = model.dim();
    let unit = match direction {
        Some(u) => {
            if u.len() != d {
                return Err(Error::DimensionMismatch {
                    context: "adversarial direction",
                    expected: d,
                    actual: u.len(),
                });
            }
            let n = norm2(u);
            if n <= 0.0 {
                return Err(Error::InvalidParameter(
                    "direction must be nonzero".into(),
                ));
            }
            u.iter().map(|v| v / n).collect::<Vec<f64>>()
        }
        None => {
            let mut e = vec![0.0; d];
            e[0] = 1.0;
            e
        }
    };
    let _ = instance;
    let mut predictions = oracle.actions.clone();
    let displacement = (rho * oracle.cost).sqrt();
    for (p, u) in predictions[0].iter_mut().zip(&unit) {
        *p += displacement * u;
    }
    Ok(predictions)
}

/// Smallest rho where the calibrated bound at trust `theta` stops beating the
/// prediction-free bound (`theta = 0`), found by bisection on the sign
/// change. `None` when no crossing lies in `(0, rho_max]`.
pub fn crossing_rho(m: f64, alpha: f64, beta: f64, theta: f64, rho_max: f64) -> Option<f64> {
    if theta <= 0.0 {
        return None;
    }
    let robd = cr_upper_optimal(m, alpha, beta, 0.0, 0.0);
    let gap = |rho: f64| cr_upper_optimal(m, alpha, beta, theta, rho) - robd;
    if gap(0.0) >= 0.0 || gap(rho_max) <= 0.0 {
        return None;
    }
    let (mut lo, mut hi) = (0.0, rho_max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gap(mid) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrator::optimal_lambda2;
    use crate::cost::SwitchingCost;
    use crate::oracle::{offline_optimal, prediction_error_rho};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lower_bound_values() {
        assert_eq!(cr_lower_pure_ml(1.0, 10.0, 0.0), 1.0);
        assert!((cr_lower_pure_ml(1.0, 10.0, 1.0) - 11.5).abs() < 1e-12);
        // slope
        let s = cr_lower_pure_ml(1.0, 10.0, 2.0) - cr_lower_pure_ml(1.0, 10.0, 1.0);
        assert!((s - 10.5).abs() < 1e-12);
    }

    #[test]
    fn robd_bound_value_and_branch_equality() {
        let l2 = optimal_lambda2(1.0, 10.0, 10.0, 1.0, 0.0).unwrap();
        let inputs = BoundInputs {
            m: 1.0,
            alpha: 10.0,
            beta: 10.0,
            lambda1: 1.0,
            lambda2: l2,
            lambda3: 0.0,
            rho: 7.0,
        };
        let expect = 0.5 * (41.0_f64.sqrt() + 1.0);
        assert!((cr_upper_mla_robd(&inputs) - expect).abs() < 1e-10);
        // both max arguments coincide at the optimal lambda2
        let first = (1.0 + l2 * 10.0) / 1.0;
        let second = 1.0 + 10.0 * 1.0 / ((l2 + 0.0) * 10.0 + 1.0);
        assert!((first - second).abs() < 1e-10);
        // rho term vanishes with lambda3 = 0 regardless of rho
        let mut with_rho = inputs;
        with_rho.rho = 100.0;
        assert!((cr_upper_mla_robd(&with_rho) - expect).abs() < 1e-10);
    }

    #[test]
    fn lambda2_increase_raises_first_branch() {
        let base = BoundInputs {
            m: 1.0,
            alpha: 10.0,
            beta: 10.0,
            lambda1: 1.0,
            lambda2: 2.0,
            lambda3: 0.0,
            rho: 0.0,
        };
        let mut bigger = base;
        bigger.lambda2 = 3.0;
        let diff = cr_upper_mla_robd(&bigger) - cr_upper_mla_robd(&base);
        assert!((diff - 10.0).abs() < 1e-9, "linear in lambda2 with slope beta/m");
    }

    #[test]
    fn optimal_bound_matches_arbitrary_bound_at_optimal_lambda2() {
        for theta in [0.0, 0.1, 0.5, 1.0, 5.0] {
            for rho in [0.0, 0.3, 2.0] {
                let (m, a, b) = (1.0, 10.0, 10.0);
                let l2 = optimal_lambda2(m, a, b, 1.0, theta).unwrap();
                let generic = cr_upper_mla_robd(&BoundInputs {
                    m,
                    alpha: a,
                    beta: b,
                    lambda1: 1.0,
                    lambda2: l2,
                    lambda3: theta,
                    rho,
                });
                let optimal = cr_upper_optimal(m, a, b, theta, rho);
                assert!(
                    (generic - optimal).abs() < 1e-10,
                    "theta {theta} rho {rho}: {generic} vs {optimal}"
                );
            }
        }
    }

    #[test]
    fn optimal_bound_theta_zero_is_robd() {
        let v = cr_upper_optimal(1.0, 10.0, 10.0, 0.0, 0.0);
        assert!((v - 0.5 * (41.0_f64.sqrt() + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn optimal_bound_decreasing_in_theta_at_rho_zero() {
        let mut prev = f64::INFINITY;
        for i in 0..60 {
            let theta = i as f64 * 0.25;
            let v = cr_upper_optimal(1.0, 10.0, 10.0, theta, 0.0);
            assert!(v <= prev + 1e-12);
            assert!(v >= 1.0);
            prev = v;
        }
    }

    #[test]
    fn optimal_bound_unbounded_in_theta_with_rho() {
        let small = cr_upper_optimal(1.0, 10.0, 10.0, 1.0, 0.5);
        let large = cr_upper_optimal(1.0, 10.0, 10.0, 1000.0, 0.5);
        assert!(large > small + 1000.0);
    }

    #[test]
    fn crossing_structure_exists() {
        let theta = 0.5;
        let rho_star = crossing_rho(1.0, 10.0, 10.0, theta, 10.0).expect("crossing");
        assert!(rho_star > 0.0);
        let robd = cr_upper_optimal(1.0, 10.0, 10.0, 0.0, 0.0);
        let below = cr_upper_optimal(1.0, 10.0, 10.0, theta, 0.5 * rho_star);
        let above = cr_upper_optimal(1.0, 10.0, 10.0, theta, 1.5 * rho_star);
        assert!(below < robd);
        assert!(above > robd);
    }

    #[test]
    fn calibration_beats_raw_predictions_for_large_rho() {
        // small trust keeps the theta rho slope below the lower-bound slope
        let theta = 0.05;
        for rho in [2.0, 5.0, 20.0] {
            let calibrated = cr_upper_optimal(1.0, 10.0, 10.0, theta, rho);
            let raw = cr_lower_pure_ml(1.0, 10.0, rho);
            assert!(calibrated < raw, "rho {rho}: {calibrated} vs {raw}");
        }
    }

    #[test]
    fn regret_bound_reduces_to_movement_term() {
        let inputs = RegretBoundInputs {
            g: 2.0,
            omega: 1.0,
            horizon: 16,
            budget: 3.0,
            l_rho: 0.7,
            m: 1.0,
            alpha: 10.0,
            beta: 10.0,
            lambda1: 1.0,
            lambda2: 0.0,
            lambda3: 0.0,
            budget_satisfied: true,
        };
        let v = regret_upper(&inputs).unwrap();
        let exact = (1.0 + 0.05) * 2.0 * (2.0 * 16.0 * 3.0 / 10.0_f64).sqrt();
        assert!((v - exact).abs() < 1e-12, "{v} vs {exact}");

        let mut zero_budget = inputs;
        zero_budget.budget = 0.0;
        assert_eq!(regret_upper(&zero_budget).unwrap(), 0.0);
    }

    #[test]
    fn regret_bound_branch_selection() {
        let base = RegretBoundInputs {
            g: 1.5,
            omega: 2.0,
            horizon: 24,
            budget: 1.2,
            l_rho: 0.4,
            m: 1.0,
            alpha: 10.0,
            beta: 10.0,
            lambda1: 1.0,
            lambda2: 0.3,
            lambda3: 0.5,
            budget_satisfied: true,
        };
        // lambda3 = 0.5 < alpha/beta = 1 and budget satisfied: scaled branch
        let t = 24.0;
        let movement = (1.0 + 0.05) * 1.5 * (2.0 * t * 1.2 / 10.0_f64).sqrt();
        let expect = 10.0 / (10.0 - 0.5 * 10.0)
            * (movement + 0.3 * 10.0 * t * 4.0 / 2.0 + 0.5 * 10.0 / 2.0 * 0.4);
        assert!((regret_upper(&base).unwrap() - expect).abs() < 1e-10);

        let mut violated = base;
        violated.budget_satisfied = false;
        let expect2 = movement + (0.3 + 0.5) * 10.0 * t * 4.0 / 2.0;
        assert!((regret_upper(&violated).unwrap() - expect2).abs() < 1e-10);
    }

    #[test]
    fn regret_bound_rejects_small_lambda1() {
        let mut inputs = RegretBoundInputs {
            g: 1.0,
            omega: 1.0,
            horizon: 8,
            budget: 1.0,
            l_rho: 0.0,
            m: 1.0,
            alpha: 10.0,
            beta: 10.0,
            lambda1: 0.5,
            lambda2: 0.0,
            lambda3: 0.0,
            budget_satisfied: true,
        };
        assert!(regret_upper(&inputs).is_err());
        inputs.lambda1 = 0.99;
        assert!(regret_upper(&inputs).is_ok());
    }

    #[test]
    fn adversarial_round_trip() {
        let model = CostModel::quadratic_tracking(SwitchingCost::isotropic(1, 5.0).unwrap());
        let inst = ProblemInstance::new(
            "adv",
            vec![0.0],
            vec![vec![1.0], vec![0.5], vec![-0.3]],
        )
        .unwrap();
        let oracle = offline_optimal(&inst, &model).unwrap();
        for rho in [0.0, 0.1, 1.0] {
            let preds = adversarial_prediction(&inst, &model, &oracle, rho, None).unwrap();
            let measured = prediction_error_rho(&preds, &oracle, 0.0).unwrap();
            assert!((measured - rho).abs() <= 1e-9, "rho {rho} vs {measured}");
            if rho == 0.0 {
                assert_eq!(preds, oracle.actions);
            }
        }
    }

    #[test]
    fn adversarial_with_random_direction_d2() {
        let model = CostModel::quadratic_tracking(SwitchingCost::isotropic(2, 3.0).unwrap());
        let inst = ProblemInstance::new(
            "adv2",
            vec![0.0, 0.0],
            vec![vec![1.0, -1.0], vec![0.4, 0.2]],
        )
        .unwrap();
        let oracle = offline_optimal(&inst, &model).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dir = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let preds = adversarial_prediction(&inst, &model, &oracle, 0.7, Some(&dir)).unwrap();
        let measured = prediction_error_rho(&preds, &oracle, 0.0).unwrap();
        assert!((measured - 0.7).abs() <= 1e-9);
    }
}
