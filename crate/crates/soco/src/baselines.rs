//! Non-learned and hybrid baselines.
//!
//! R-OBD, greedy and follow-the-prediction are parameterizations of the
//! calibrator. Switch alternates between the R-OBD expert and raw PureML
//! predictions based on a growing cost-ratio threshold. The exact switching
//! rule used in prior experimental work is not recoverable, so the rule here
//! (shadow costs evaluated from the shared played action, accumulator reset
//! on switch) is a documented reimplementation.

use crate::calibrator::{calibrate_step, optimal_lambda2, CalibratorParams};
use crate::cost::CostModel;
use crate::error::{Error, Result};
use crate::net::{forward, PolicyWeights};

/// R-OBD: no prediction pull, `lambda2` set optimally for theta = 0.
pub fn robd_params(model: &CostModel) -> Result<CalibratorParams> {
    let lambda2 = optimal_lambda2(model.m(), model.alpha(), model.beta(), 1.0, 0.0)?;
    CalibratorParams::new(1.0, lambda2, 0.0)
}

/// Greedy: minimize the current hitting plus switching cost.
pub fn greedy_params() -> CalibratorParams {
    CalibratorParams::new(1.0, 0.0, 0.0).unwrap()
}

/// Follow the prediction.
pub fn follow_the_prediction_params() -> CalibratorParams {
    CalibratorParams::new(1.0, 0.0, 1.0).unwrap()
}

/// MLA-ROBD with trust parameter `theta`: `lambda1 = 1`, `lambda3 = theta`,
/// `lambda2` set optimally.
pub fn mla_robd_params(model: &CostModel, theta: f64) -> Result<CalibratorParams> {
    let lambda2 = optimal_lambda2(model.m(), model.alpha(), model.beta(), 1.0, theta)?;
    CalibratorParams::new(1.0, lambda2, theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivePolicy {
    Expert,
    Ml,
}

#[derive(Debug, Clone)]
pub struct SwitchState {
    pub active: ActivePolicy,
    pub gamma: f64,
    pub gamma_growth: f64,
    pub cum_cost_active: f64,
    pub cum_cost_shadow: f64,
}

impl SwitchState {
    pub fn new(initial: ActivePolicy, gamma: f64, gamma_growth: f64) -> Result<Self> {
        if gamma <= 1.0 || gamma_growth <= 1.0 {
            return Err(Error::InvalidParameter(format!(
                "gamma and gamma_growth must exceed 1, got ({gamma}, {gamma_growth})"
            )));
        }
        Ok(SwitchState {
            active: initial,
            gamma,
            gamma_growth,
            cum_cost_active: 0.0,
            cum_cost_shadow: 0.0,
        })
    }
}

impl Default for SwitchState {
    /// ML-first with gamma = 1.5 doubling on each switch.
    fn default() -> Self {
        SwitchState::new(ActivePolicy::Ml, 1.5, 2.0).unwrap()
    }
}

/// One step of the Switch baseline.
///
/// Both candidates are computed from the played `x_prev`: the R-OBD step and
/// the raw PureML forward. The active candidate is played and its realized
/// per-step cost accumulated; the shadow candidate's hypothetical cost from
/// the same `x_prev` goes into the shadow accumulator. Once the active
/// accumulator exceeds `gamma` times the shadow one, the roles flip, `gamma`
/// grows, and both accumulators reset.
pub fn switch_step(
    state: &mut SwitchState,
    model: &CostModel,
    y: &[f64],
    x_prev: &[f64],
    pureml_weights: &PolicyWeights,
    robd_params: &CalibratorParams,
) -> Result<Vec<f64>> {
    let expert = calibrate_step(model, robd_params, y, x_prev, x_prev, None)?;
    let (ml, _) = forward(pureml_weights, y, x_prev)?;

    let step_cost = |x: &[f64]| -> Result<f64> {
        Ok(model.hitting_cost(x, y)? + model.switching_cost(x, x_prev)?)
    };
    let expert_cost = step_cost(&expert)?;
    let ml_cost = step_cost(&ml)?;

    let (played, played_cost, shadow_cost) = match state.active {
        ActivePolicy::Expert => (expert, expert_cost, ml_cost),
        ActivePolicy::Ml => (ml, ml_cost, expert_cost),
    };
    state.cum_cost_active += played_cost;
    state.cum_cost_shadow += shadow_cost;

    if state.cum_cost_active > state.gamma * state.cum_cost_shadow {
        state.active = match state.active {
            ActivePolicy::Expert => ActivePolicy::Ml,
            ActivePolicy::Ml => ActivePolicy::Expert,
        };
        state.gamma *= state.gamma_growth;
        state.cum_cost_active = 0.0;
        state.cum_cost_shadow = 0.0;
    }
    Ok(played)
}
