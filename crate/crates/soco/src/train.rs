//! End-to-end training of the calibrated optimizer and of the standalone
//! PureML baseline.
//!
//! The episode pipeline is recurrent: the net maps `(y_t, x_{t-1})` to a
//! prediction, the calibrator turns it into the played action, and the action
//! feeds both the next net input and the next calibration. Backpropagation
//! therefore runs through time, routing each action's adjoint through (i) the
//! step costs, (ii) the next step's switching cost, (iii) the next
//! calibration via its implicit Jacobian, and (iv) the next net input.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::calibrator::{calibrate_step, optimal_lambda2, step_jacobians, ActionBounds, CalibratorParams, StepJacobians};
use crate::cost::CostModel;
use crate::error::{Error, Result};
use crate::linalg::add_scaled;
use crate::net::{backward, forward, init_weights, ForwardTape, NetArchitecture, NetGradients, PolicyWeights};
use crate::oracle::{offline_optimal, prediction_error_rho, OracleSolution};
use crate::types::{EpisodeTrace, ProblemInstance};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Loss trade-off: `mu` on the prediction-error term, `1 - mu` on the
    /// post-calibration cost.
    pub mu: f64,
    /// Prediction-error threshold below which the error loss is zero.
    pub rho_bar: f64,
    /// Trust parameter; `lambda3 = theta * lambda1` and `lambda2` is derived.
    pub theta: f64,
    pub lambda1: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mu: 0.6,
            rho_bar: 0.1,
            theta: 0.5,
            lambda1: 1.0,
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            hidden: vec![10, 10, 10],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::InvalidParameter(format!(
                "mu must be in [0, 1], got {}",
                self.mu
            )));
        }
        if self.rho_bar < 0.0 || self.theta < 0.0 {
            return Err(Error::InvalidParameter(
                "rho_bar and theta must be non-negative".into(),
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidParameter(
                "epochs and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn calibrator_params(&self, model: &CostModel) -> Result<CalibratorParams> {
        let lambda2 = optimal_lambda2(
            model.m(),
            model.alpha(),
            model.beta(),
            self.lambda1,
            self.theta,
        )?;
        CalibratorParams::new(self.lambda1, lambda2, self.theta * self.lambda1)
    }
}

#[derive(Debug, Clone)]
pub struct PureMlConfig {
    /// Weight on the cost-ratio term; `kappa = 0` trains on raw cost.
    pub kappa: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
}

impl Default for PureMlConfig {
    fn default() -> Self {
        PureMlConfig {
            kappa: 0.0,
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            hidden: vec![10, 10, 10],
        }
    }
}

impl PureMlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(Error::InvalidParameter(format!(
                "kappa must be in [0, 1], got {}",
                self.kappa
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidParameter(
                "epochs and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Instances with their precomputed oracles. The oracle actions and cost are
/// constants of the loss, so they are solved exactly once.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub instances: Vec<ProblemInstance>,
    pub oracles: Vec<OracleSolution>,
}

impl Dataset {
    pub fn from_instances(instances: Vec<ProblemInstance>, model: &CostModel) -> Result<Self> {
        let oracles = instances
            .par_iter()
            .map(|inst| offline_optimal(inst, model))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { instances, oracles })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// `relu(rho - rho_bar)` with `rho` measured against the oracle.
pub fn prediction_loss(
    predictions: &[Vec<f64>],
    oracle: &OracleSolution,
    rho_bar: f64,
) -> Result<f64> {
    let rho = prediction_error_rho(predictions, oracle, 0.0)?;
    Ok((rho - rho_bar).max(0.0))
}

/// Episodes whose oracle cost sits at or below this floor carry no usable
/// ratio signal (an all-zero-context episode has oracle cost exactly zero),
/// so their prediction-error term is dropped and they train on cost alone.
const DEGENERATE_ORACLE_FLOOR: f64 = 1e-12;

struct StepRecord {
    tape: ForwardTape,
    prediction: Vec<f64>,
    action: Vec<f64>,
    jac: StepJacobians,
}

fn unroll_calibrated(
    weights: &PolicyWeights,
    instance: &ProblemInstance,
    model: &CostModel,
    params: &CalibratorParams,
    bounds: Option<&ActionBounds>,
) -> Result<(Vec<StepRecord>, EpisodeTrace)> {
    let t_len = instance.horizon();
    let mut records = Vec::with_capacity(t_len);
    let mut hitting = Vec::with_capacity(t_len);
    let mut switching = Vec::with_capacity(t_len);
    let mut x_prev = instance.x0.clone();
    for (t, y) in instance.contexts.iter().enumerate() {
        let (x_tilde, tape) = forward(weights, y, &x_prev)?;
        let x = calibrate_step(model, params, y, &x_prev, &x_tilde, bounds)?;
        if let Some(b) = bounds {
            if !b.is_interior(&x, 1e-9) {
                return Err(Error::BoundaryOptimum { step: t + 1 });
            }
        }
        hitting.push(model.hitting_cost(&x, y)?);
        switching.push(model.switching_cost(&x, &x_prev)?);
        let jac = step_jacobians(model, params, y, &x)?;
        records.push(StepRecord {
            tape,
            prediction: x_tilde,
            action: x.clone(),
            jac,
        });
        x_prev = x;
    }
    let trace = EpisodeTrace::new(
        records.iter().map(|r| r.prediction.clone()).collect(),
        records.iter().map(|r| r.action.clone()).collect(),
        hitting,
        switching,
    )?;
    Ok((records, trace))
}

/// Loss of one episode: `mu * relu(rho - rho_bar) + (1 - mu) * cost`.
pub fn episode_loss(
    weights: &PolicyWeights,
    instance: &ProblemInstance,
    model: &CostModel,
    params: &CalibratorParams,
    mu: f64,
    rho_bar: f64,
    oracle: &OracleSolution,
) -> Result<(f64, EpisodeTrace)> {
    let mut predictions = Vec::with_capacity(instance.horizon());
    let mut actions = Vec::with_capacity(instance.horizon());
    let mut hitting = Vec::with_capacity(instance.horizon());
    let mut switching = Vec::with_capacity(instance.horizon());
    let mut x_prev = instance.x0.clone();
    for y in &instance.contexts {
        let (x_tilde, _) = forward(weights, y, &x_prev)?;
        let x = calibrate_step(model, params, y, &x_prev, &x_tilde, None)?;
        hitting.push(model.hitting_cost(&x, y)?);
        switching.push(model.switching_cost(&x, &x_prev)?);
        predictions.push(x_tilde);
        actions.push(x.clone());
        x_prev = x;
    }
    let trace = EpisodeTrace::new(predictions, actions, hitting, switching)?;
    let pred_term = if mu > 0.0 && oracle.cost > DEGENERATE_ORACLE_FLOOR {
        prediction_loss(&trace.predictions, oracle, rho_bar)?
    } else {
        0.0
    };
    Ok((mu * pred_term + (1.0 - mu) * trace.total_cost(), trace))
}

/// Reverse pass over a whole episode; returns the weight gradients together
/// with the loss and trace of the same forward pass.
#[allow(clippy::too_many_arguments)]
fn episode_backward(
    weights: &PolicyWeights,
    instance: &ProblemInstance,
    model: &CostModel,
    params: &CalibratorParams,
    mu: f64,
    rho_bar: f64,
    oracle: &OracleSolution,
    bounds: Option<&ActionBounds>,
) -> Result<(NetGradients, f64, EpisodeTrace)> {
    let (records, trace) = unroll_calibrated(weights, instance, model, params, bounds)?;
    let t_len = records.len();
    let d = model.dim();
    let q = model.switching().q();

    let (rho, pred_term) = if mu > 0.0 && oracle.cost > DEGENERATE_ORACLE_FLOOR {
        let rho = prediction_error_rho(&trace.predictions, oracle, 0.0)?;
        (rho, (rho - rho_bar).max(0.0))
    } else {
        (0.0, 0.0)
    };
    let relu_open = mu > 0.0 && rho > rho_bar;
    let loss = mu * pred_term + (1.0 - mu) * trace.total_cost();

    let mut grads = NetGradients::zeros(&weights.arch);
    // adjoint contributions flowing from step t+1 into x_t
    let mut carry = vec![0.0; d];
    let cost_weight = 1.0 - mu;
    for t in (0..t_len).rev() {
        let rec = &records[t];
        let x_prev = if t == 0 {
            instance.x0.as_slice()
        } else {
            records[t - 1].action.as_slice()
        };
        let diff: Vec<f64> = rec.action.iter().zip(x_prev).map(|(a, p)| a - p).collect();
        let q_diff = q.mul_vec(&diff);

        // a_t = (1 - mu) * (grad_f + 2 Q (x_t - x_{t-1})) + carry
        let mut adjoint = model.hitting_grad(&rec.action, &instance.contexts[t])?;
        for v in adjoint.iter_mut() {
            *v *= cost_weight;
        }
        add_scaled(&mut adjoint, 2.0 * cost_weight, &q_diff);
        add_scaled(&mut adjoint, 1.0, &carry);

        // prediction adjoint through the implicit layer plus the error loss
        let mut g_tilde = rec.jac.wrt_prediction.tr_mul_vec(&adjoint);
        if relu_open {
            let scale = 2.0 * mu / oracle.cost;
            for ((g, p), star) in g_tilde
                .iter_mut()
                .zip(&rec.prediction)
                .zip(&oracle.actions[t])
            {
                *g += scale * (p - star);
            }
        }
        let (layer_grads, grad_x_prev, _grad_y) = backward(weights, &rec.tape, &g_tilde);
        grads.add_assign(&layer_grads);

        // carries into x_{t-1}: the calibrator, the net input, and the
        // switching cost c(x_t, x_{t-1})
        carry = rec.jac.wrt_prev.tr_mul_vec(&adjoint);
        add_scaled(&mut carry, 1.0, &grad_x_prev);
        add_scaled(&mut carry, -2.0 * cost_weight, &q_diff);
    }
    Ok((grads, loss, trace))
}

/// Gradient of [`episode_loss`] with respect to the net weights.
pub fn grad_episode(
    weights: &PolicyWeights,
    instance: &ProblemInstance,
    model: &CostModel,
    params: &CalibratorParams,
    mu: f64,
    rho_bar: f64,
    oracle: &OracleSolution,
) -> Result<NetGradients> {
    episode_backward(weights, instance, model, params, mu, rho_bar, oracle, None)
        .map(|(g, _, _)| g)
}

/// [`grad_episode`] under a box-constrained action set. The step Jacobians
/// only hold at interior optima, so a calibrated action on the boundary
/// aborts with [`Error::BoundaryOptimum`].
#[allow(clippy::too_many_arguments)]
pub fn grad_episode_bounded(
    weights: &PolicyWeights,
    instance: &ProblemInstance,
    model: &CostModel,
    params: &CalibratorParams,
    mu: f64,
    rho_bar: f64,
    oracle: &OracleSolution,
    bounds: &ActionBounds,
) -> Result<NetGradients> {
    episode_backward(
        weights,
        instance,
        model,
        params,
        mu,
        rho_bar,
        oracle,
        Some(bounds),
    )
    .map(|(g, _, _)| g)
}

type PureMlStep = (ForwardTape, Vec<f64>);

fn unroll_pureml(
    weights: &PolicyWeights,
    instance: &ProblemInstance,
    model: &CostModel,
) -> Result<(Vec<PureMlStep>, EpisodeTrace)> {
    let t_len = instance.horizon();
    let mut steps = Vec::with_capacity(t_len);
    let mut hitting = Vec::with_capacity(t_len);
    let mut switching = Vec::with_capacity(t_len);
    let mut x_prev = instance.x0.clone();
    for y in &instance.contexts {
        let (x_tilde, tape) = forward(weights, y, &x_prev)?;
        hitting.push(model.hitting_cost(&x_tilde, y)?);
        switching.push(model.switching_cost(&x_tilde, &x_prev)?);
        steps.push((tape, x_tilde.clone()));
        x_prev = x_tilde;
    }
    let actions: Vec<Vec<f64>> = steps.iter().map(|(_, a)| a.clone()).collect();
    let trace = EpisodeTrace::new(actions.clone(), actions, hitting, switching)?;
    Ok((steps, trace))
}

/// PureML loss: `kappa * cost / cost(oracle) + (1 - kappa) * cost`.
pub fn pureml_episode_loss(
    weights: &PolicyWeights,
    instance: &ProblemInstance,
    model: &CostModel,
    kappa: f64,
    oracle: &OracleSolution,
) -> Result<(f64, EpisodeTrace)> {
    let (_, trace) = unroll_pureml(weights, instance, model)?;
    let scale = pureml_scale(kappa, oracle);
    Ok((scale * trace.total_cost(), trace))
}

fn pureml_scale(kappa: f64, oracle: &OracleSolution) -> f64 {
    // ratio term dropped on degenerate episodes, matching the calibrated loss
    if kappa > 0.0 && oracle.cost > DEGENERATE_ORACLE_FLOOR {
        kappa / oracle.cost + (1.0 - kappa)
    } else if kappa > 0.0 {
        1.0 - kappa
    } else {
        1.0
    }
}

fn pureml_backward(
    weights: &PolicyWeights,
    instance: &ProblemInstance,
    model: &CostModel,
    kappa: f64,
    oracle: &OracleSolution,
) -> Result<(NetGradients, f64, EpisodeTrace)> {
    let (steps, trace) = unroll_pureml(weights, instance, model)?;
    let scale = pureml_scale(kappa, oracle);
    let loss = scale * trace.total_cost();
    let q = model.switching().q();
    let d = model.dim();

    let mut grads = NetGradients::zeros(&weights.arch);
    let mut carry = vec![0.0; d];
    for t in (0..steps.len()).rev() {
        let action = &steps[t].1;
        let x_prev = if t == 0 {
            instance.x0.as_slice()
        } else {
            steps[t - 1].1.as_slice()
        };
        let diff: Vec<f64> = action.iter().zip(x_prev).map(|(a, p)| a - p).collect();
        let q_diff = q.mul_vec(&diff);

        let mut adjoint = model.hitting_grad(action, &instance.contexts[t])?;
        for v in adjoint.iter_mut() {
            *v *= scale;
        }
        add_scaled(&mut adjoint, 2.0 * scale, &q_diff);
        add_scaled(&mut adjoint, 1.0, &carry);

        let (layer_grads, grad_x_prev, _) = backward(weights, &steps[t].0, &adjoint);
        grads.add_assign(&layer_grads);

        carry = grad_x_prev;
        add_scaled(&mut carry, -2.0 * scale, &q_diff);
    }
    Ok((grads, loss, trace))
}

/// Gradient of [`pureml_episode_loss`].
pub fn grad_pureml_episode(
    weights: &PolicyWeights,
    instance: &ProblemInstance,
    model: &CostModel,
    kappa: f64,
    oracle: &OracleSolution,
) -> Result<NetGradients> {
    pureml_backward(weights, instance, model, kappa, oracle).map(|(g, _, _)| g)
}

/// Bias-corrected Adam moments.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: NetGradients,
    v: NetGradients,
    step: u64,
}

impl AdamState {
    pub fn new(arch: &NetArchitecture) -> Self {
        AdamState {
            m: NetGradients::zeros(arch),
            v: NetGradients::zeros(arch),
            step: 0,
        }
    }
}

pub fn adam_step(
    state: &mut AdamState,
    weights: &mut PolicyWeights,
    grad: &NetGradients,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    state.step += 1;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for l in 0..weights.layers.len() {
        let gw = grad.layers[l].weights.data();
        let mw = state.m.layers[l].weights.data_mut();
        let vw = state.v.layers[l].weights.data_mut();
        let w = weights.layers[l].weights.data_mut();
        for i in 0..w.len() {
            mw[i] = beta1 * mw[i] + (1.0 - beta1) * gw[i];
            vw[i] = beta2 * vw[i] + (1.0 - beta2) * gw[i] * gw[i];
            w[i] -= lr * (mw[i] / bc1) / ((vw[i] / bc2).sqrt() + eps);
        }
        let gb = &grad.layers[l].bias;
        let mb = &mut state.m.layers[l].bias;
        let vb = &mut state.v.layers[l].bias;
        let b = &mut weights.layers[l].bias;
        for i in 0..b.len() {
            mb[i] = beta1 * mb[i] + (1.0 - beta1) * gb[i];
            vb[i] = beta2 * vb[i] + (1.0 - beta2) * gb[i] * gb[i];
            b[i] -= lr * (mb[i] / bc1) / ((vb[i] / bc2).sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_avg_cost: f64,
    pub val_mean_rho: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub weights: PolicyWeights,
    pub log: Vec<EpochLog>,
    /// Epoch whose validation loss selected the returned weights.
    pub best_epoch: usize,
}

pub fn write_training_log_csv<W: std::io::Write>(w: &mut W, log: &[EpochLog]) -> Result<()> {
    writeln!(w, "epoch,train_loss,val_loss,val_avg_cost,val_mean_rho")?;
    for e in log {
        writeln!(
            w,
            "{},{},{},{},{}",
            e.epoch, e.train_loss, e.val_loss, e.val_avg_cost, e.val_mean_rho
        )?;
    }
    Ok(())
}

enum Objective {
    Calibrated {
        params: CalibratorParams,
        mu: f64,
        rho_bar: f64,
    },
    PureMl { kappa: f64 },
}

fn arch_for(instance: &ProblemInstance, hidden: &[usize]) -> Result<NetArchitecture> {
    NetArchitecture::new(
        instance.context_dim() + instance.action_dim(),
        hidden.to_vec(),
        instance.action_dim(),
    )
}

#[allow(clippy::too_many_arguments)]
fn run_training(
    train: &Dataset,
    val: &Dataset,
    model: &CostModel,
    objective: Objective,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    seed: u64,
    hidden: &[usize],
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::InvalidParameter("empty training dataset".into()));
    }
    let arch = arch_for(&train.instances[0], hidden)?;
    let mut weights = init_weights(&arch, seed);
    let mut adam = AdamState::new(&arch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed_5eed_5eed);

    let backward_one = |weights: &PolicyWeights, idx: usize| -> Result<(NetGradients, f64)> {
        let inst = &train.instances[idx];
        let oracle = &train.oracles[idx];
        match &objective {
            Objective::Calibrated { params, mu, rho_bar } => {
                episode_backward(weights, inst, model, params, *mu, *rho_bar, oracle, None)
                    .map(|(g, l, _)| (g, l))
            }
            Objective::PureMl { kappa } => {
                pureml_backward(weights, inst, model, *kappa, oracle).map(|(g, l, _)| (g, l))
            }
        }
    };
    let loss_one = |weights: &PolicyWeights,
                    inst: &ProblemInstance,
                    oracle: &OracleSolution|
     -> Result<(f64, EpisodeTrace)> {
        match &objective {
            Objective::Calibrated { params, mu, rho_bar } => {
                episode_loss(weights, inst, model, params, *mu, *rho_bar, oracle)
            }
            Objective::PureMl { kappa } => {
                pureml_episode_loss(weights, inst, model, *kappa, oracle)
            }
        }
    };

    let mut log = Vec::with_capacity(epochs);
    let mut best: Option<(f64, PolicyWeights, usize)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(batch_size) {
            let results: Vec<(NetGradients, f64)> = batch
                .par_iter()
                .map(|&i| backward_one(&weights, i))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| match e {
                    // overflowing weights surface as non-finite outputs or
                    // costs somewhere inside the episode
                    Error::NonFinite { .. } => Error::Divergence { epoch },
                    other => other,
                })?;
            let mut mean_grad = NetGradients::zeros(&arch);
            for (g, l) in &results {
                mean_grad.add_assign(g);
                loss_sum += l;
            }
            mean_grad.scale(1.0 / results.len() as f64);
            adam_step(&mut adam, &mut weights, &mean_grad, lr, beta1, beta2, eps);
        }
        let train_loss = loss_sum / train.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }

        let (val_loss, val_avg_cost, val_mean_rho) = if val.is_empty() {
            (train_loss, f64::NAN, f64::NAN)
        } else {
            let stats: Vec<(f64, f64, Option<f64>)> = val
                .instances
                .par_iter()
                .zip(&val.oracles)
                .map(|(inst, oracle)| -> Result<(f64, f64, Option<f64>)> {
                    let (loss, trace) = loss_one(&weights, inst, oracle)?;
                    let rho = if oracle.cost > DEGENERATE_ORACLE_FLOOR {
                        Some(prediction_error_rho(&trace.predictions, oracle, 0.0)?)
                    } else {
                        None
                    };
                    Ok((loss, trace.total_cost(), rho))
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Divergence { epoch },
                    other => other,
                })?;
            let n = stats.len() as f64;
            let rhos: Vec<f64> = stats.iter().filter_map(|s| s.2).collect();
            let mean_rho = if rhos.is_empty() {
                f64::NAN
            } else {
                rhos.iter().sum::<f64>() / rhos.len() as f64
            };
            (
                stats.iter().map(|s| s.0).sum::<f64>() / n,
                stats.iter().map(|s| s.1).sum::<f64>() / n,
                mean_rho,
            )
        };
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, weights.clone(), epoch));
        }
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_avg_cost,
            val_mean_rho,
        });
    }
    let (_, best_weights, best_epoch) = best.unwrap();
    Ok(TrainReport {
        weights: best_weights,
        log,
        best_epoch,
    })
}

/// Train the calibrated optimizer end to end.
pub fn train_ecl2o(
    train: &Dataset,
    val: &Dataset,
    model: &CostModel,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    let params = config.calibrator_params(model)?;
    run_training(
        train,
        val,
        model,
        Objective::Calibrated {
            params,
            mu: config.mu,
            rho_bar: config.rho_bar,
        },
        config.epochs,
        config.batch_size,
        config.learning_rate,
        config.beta1,
        config.beta2,
        config.eps,
        config.seed,
        &config.hidden,
    )
}

/// Train the standalone optimizer that plays its predictions directly.
pub fn train_pureml(
    train: &Dataset,
    val: &Dataset,
    model: &CostModel,
    config: &PureMlConfig,
) -> Result<TrainReport> {
    config.validate()?;
    run_training(
        train,
        val,
        model,
        Objective::PureMl {
            kappa: config.kappa,
        },
        config.epochs,
        config.batch_size,
        config.learning_rate,
        config.beta1,
        config.beta2,
        config.eps,
        config.seed,
        &config.hidden,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::robd_params;
    use crate::cost::SwitchingCost;
    use crate::eval::run_expert_episode;
    use rand::prelude::*;

    fn model_1d(q: f64) -> CostModel {
        CostModel::quadratic_tracking(SwitchingCost::isotropic(1, q).unwrap())
    }

    fn instance_1d(id: &str, x0: f64, ys: &[f64]) -> ProblemInstance {
        ProblemInstance::new(id, vec![x0], ys.iter().map(|y| vec![*y]).collect()).unwrap()
    }

    #[test]
    fn prediction_loss_relu_behavior() {
        let oracle = OracleSolution {
            actions: vec![vec![0.0], vec![0.0]],
            cost: 1.0,
            grad_norm: 0.0,
        };
        // rho = 0.05
        let preds = vec![vec![0.1], vec![0.2]];
        let rho = prediction_error_rho(&preds, &oracle, 0.0).unwrap();
        assert!((rho - 0.05).abs() < 1e-12);
        assert_eq!(prediction_loss(&preds, &oracle, 0.1).unwrap(), 0.0);
        // rho = 0.3 against rho_bar = 0.1
        let preds = vec![vec![(0.3f64).sqrt()], vec![0.0]];
        assert!((prediction_loss(&preds, &oracle, 0.1).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(prediction_loss(&oracle.actions, &oracle, 0.0).unwrap(), 0.0);
    }

    fn zeroed(arch: &NetArchitecture) -> PolicyWeights {
        let mut w = init_weights(arch, 0);
        for layer in &mut w.layers {
            for v in layer.weights.data_mut() {
                *v = 0.0;
            }
        }
        w
    }

    #[test]
    fn episode_loss_hand_computed_t1() {
        // zero net so the prediction is 0; with only the previous-action pull
        // the step solves 11 x = 1
        let model = model_1d(5.0);
        let inst = instance_1d("t1", 0.0, &[1.0]);
        let oracle = offline_optimal(&inst, &model).unwrap();
        let arch = NetArchitecture::default_for(1, 1);
        let w = zeroed(&arch);

        let params = CalibratorParams::new(1.0, 0.0, 0.0).unwrap();
        let (loss, trace) =
            episode_loss(&w, &inst, &model, &params, 0.0, 0.1, &oracle).unwrap();
        assert!((trace.actions[0][0] - 1.0 / 11.0).abs() < 1e-12);
        assert!((loss - 5.0 / 11.0).abs() < 1e-12);

        // with the prediction pull at weight 1 the same zero prediction
        // shifts the solve to 21 x = 1
        let params = CalibratorParams::new(1.0, 0.0, 1.0).unwrap();
        let (loss, trace) =
            episode_loss(&w, &inst, &model, &params, 0.0, 0.1, &oracle).unwrap();
        assert!((trace.actions[0][0] - 1.0 / 21.0).abs() < 1e-12);
        let x = 1.0 / 21.0;
        let expect = 0.5 * (x - 1.0) * (x - 1.0) + 5.0 * x * x;
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn episode_loss_mu_endpoints_interpolate() {
        let model = model_1d(5.0);
        let inst = instance_1d("mu", 0.1, &[1.0, -0.5, 0.7]);
        let oracle = offline_optimal(&inst, &model).unwrap();
        let arch = NetArchitecture::default_for(1, 1);
        let w = init_weights(&arch, 5);
        let params = CalibratorParams::new(1.0, 0.2, 0.8).unwrap();

        let (l0, trace) = episode_loss(&w, &inst, &model, &params, 0.0, 0.05, &oracle).unwrap();
        assert!((l0 - trace.total_cost()).abs() < 1e-12);
        let (l1, _) = episode_loss(&w, &inst, &model, &params, 1.0, 0.05, &oracle).unwrap();
        let pred = prediction_loss(&trace.predictions, &oracle, 0.05).unwrap();
        assert!((l1 - pred).abs() < 1e-12);
        for mu in [0.25, 0.5, 0.75] {
            let (l, _) = episode_loss(&w, &inst, &model, &params, mu, 0.05, &oracle).unwrap();
            assert!((l - (mu * l1 + (1.0 - mu) * l0)).abs() < 1e-10);
        }
    }

    #[test]
    fn grad_zero_when_prediction_path_blocked() {
        let model = model_1d(5.0);
        let inst = instance_1d("blocked", 0.0, &[1.0, 0.5]);
        let oracle = offline_optimal(&inst, &model).unwrap();
        let arch = NetArchitecture::default_for(1, 1);
        let w = init_weights(&arch, 9);
        let params = CalibratorParams::new(1.0, 0.3, 0.0).unwrap();
        let g = grad_episode(&w, &inst, &model, &params, 0.0, 0.1, &oracle).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    fn fd_grad_episode(
        w: &PolicyWeights,
        inst: &ProblemInstance,
        model: &CostModel,
        params: &CalibratorParams,
        mu: f64,
        rho_bar: f64,
        oracle: &OracleSolution,
        h: f64,
    ) -> NetGradients {
        let mut fd = NetGradients::zeros(&w.arch);
        for l in 0..w.layers.len() {
            for idx in 0..w.layers[l].weights.data().len() {
                let mut wp = w.clone();
                wp.layers[l].weights.data_mut()[idx] += h;
                let mut wm = w.clone();
                wm.layers[l].weights.data_mut()[idx] -= h;
                let lp = episode_loss(&wp, inst, model, params, mu, rho_bar, oracle)
                    .unwrap()
                    .0;
                let lm = episode_loss(&wm, inst, model, params, mu, rho_bar, oracle)
                    .unwrap()
                    .0;
                fd.layers[l].weights.data_mut()[idx] = (lp - lm) / (2.0 * h);
            }
            for idx in 0..w.layers[l].bias.len() {
                let mut wp = w.clone();
                wp.layers[l].bias[idx] += h;
                let mut wm = w.clone();
                wm.layers[l].bias[idx] -= h;
                let lp = episode_loss(&wp, inst, model, params, mu, rho_bar, oracle)
                    .unwrap()
                    .0;
                let lm = episode_loss(&wm, inst, model, params, mu, rho_bar, oracle)
                    .unwrap()
                    .0;
                fd.layers[l].bias[idx] = (lp - lm) / (2.0 * h);
            }
        }
        fd
    }

    fn compare_grads(an: &NetGradients, fd: &NetGradients, rel_tol: f64, scale_floor: f64) {
        for l in 0..an.layers.len() {
            for (a, f) in an.layers[l]
                .weights
                .data()
                .iter()
                .zip(fd.layers[l].weights.data())
            {
                let denom = a.abs().max(f.abs()).max(scale_floor);
                assert!(
                    ((a - f) / denom).abs() < rel_tol,
                    "layer {l}: analytic {a} vs fd {f}"
                );
            }
            for (a, f) in an.layers[l].bias.iter().zip(&fd.layers[l].bias) {
                let denom = a.abs().max(f.abs()).max(scale_floor);
                assert!(((a - f) / denom).abs() < rel_tol);
            }
        }
    }

    #[test]
    fn grad_episode_matches_fd_tiny_linear_net() {
        let model = model_1d(5.0);
        let inst = instance_1d("fd-lin", 0.2, &[1.0, -0.4]);
        let oracle = offline_optimal(&inst, &model).unwrap();
        let arch = NetArchitecture::new(2, vec![], 1).unwrap();
        let w = init_weights(&arch, 13);
        let params = CalibratorParams::new(1.0, 0.2, 0.7).unwrap();
        for mu in [0.0, 0.6, 1.0] {
            let an = grad_episode(&w, &inst, &model, &params, mu, 0.01, &oracle).unwrap();
            let fd = fd_grad_episode(&w, &inst, &model, &params, mu, 0.01, &oracle, 1e-7);
            compare_grads(&an, &fd, 1e-6, 1e-4);
        }
    }

    #[test]
    fn grad_episode_matches_fd_relu_net() {
        let model = model_1d(5.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let mut checked = 0;
        let mut attempts = 0;
        while checked < 3 && attempts < 20 {
            attempts += 1;
            let inst = instance_1d(
                "fd-relu",
                rng.random_range(-0.5..0.5),
                &(0..5)
                    .map(|_| rng.random_range(-1.5..1.5))
                    .collect::<Vec<_>>(),
            );
            let oracle = offline_optimal(&inst, &model).unwrap();
            if oracle.cost < 1e-3 {
                continue;
            }
            let arch = NetArchitecture::default_for(1, 1);
            let w = init_weights(&arch, rng.random());
            let params = CalibratorParams::new(1.0, 0.27, 0.5).unwrap();
            let mu = 0.6;
            let rho_bar = 0.1;
            // resample configurations that sit on a relu or relu-gate kink
            let (records, trace) =
                unroll_calibrated(&w, &inst, &model, &params, None).unwrap();
            let near_kink = records.iter().any(|r| {
                r.tape
                    .pre_activations
                    .iter()
                    .take(r.tape.pre_activations.len() - 1)
                    .any(|z| z.iter().any(|v| v.abs() < 1e-4))
            });
            let rho = prediction_error_rho(&trace.predictions, &oracle, 0.0).unwrap();
            if near_kink || (rho - rho_bar).abs() < 1e-3 {
                continue;
            }
            let an = grad_episode(&w, &inst, &model, &params, mu, rho_bar, &oracle).unwrap();
            let fd = fd_grad_episode(&w, &inst, &model, &params, mu, rho_bar, &oracle, 1e-6);
            compare_grads(&an, &fd, 1e-4, 1e-5);
            checked += 1;
        }
        assert!(checked >= 3, "too many kink resamples");
    }

    #[test]
    fn pureml_grad_matches_fd() {
        let model = model_1d(5.0);
        let inst = instance_1d("fd-pure", 0.1, &[0.8, -0.6, 0.3]);
        let oracle = offline_optimal(&inst, &model).unwrap();
        let arch = NetArchitecture::new(2, vec![], 1).unwrap();
        let w = init_weights(&arch, 3);
        for kappa in [0.0, 0.5, 1.0] {
            let an = grad_pureml_episode(&w, &inst, &model, kappa, &oracle).unwrap();
            let h = 1e-7;
            let mut fd = NetGradients::zeros(&arch);
            for l in 0..w.layers.len() {
                for idx in 0..w.layers[l].weights.data().len() {
                    let mut wp = w.clone();
                    wp.layers[l].weights.data_mut()[idx] += h;
                    let mut wm = w.clone();
                    wm.layers[l].weights.data_mut()[idx] -= h;
                    let lp = pureml_episode_loss(&wp, &inst, &model, kappa, &oracle)
                        .unwrap()
                        .0;
                    let lm = pureml_episode_loss(&wm, &inst, &model, kappa, &oracle)
                        .unwrap()
                        .0;
                    fd.layers[l].weights.data_mut()[idx] = (lp - lm) / (2.0 * h);
                }
            }
            for l in 0..an.layers.len() {
                for (a, f) in an.layers[l]
                    .weights
                    .data()
                    .iter()
                    .zip(fd.layers[l].weights.data())
                {
                    let denom = a.abs().max(f.abs()).max(1e-4);
                    assert!(((a - f) / denom).abs() < 1e-6, "kappa {kappa}: {a} vs {f}");
                }
            }
        }
    }

    #[test]
    fn adam_zero_grad_keeps_weights() {
        let arch = NetArchitecture::default_for(1, 1);
        let mut w = init_weights(&arch, 1);
        let snapshot = w.clone();
        let mut state = AdamState::new(&arch);
        let zero = NetGradients::zeros(&arch);
        for _ in 0..5 {
            adam_step(&mut state, &mut w, &zero, 0.1, 0.9, 0.999, 1e-8);
        }
        assert_eq!(w, snapshot);
    }

    #[test]
    fn adam_first_step_magnitude() {
        // constant unit gradient: bias-corrected ratio is 1, so the first
        // update is -lr (up to eps)
        let arch = NetArchitecture::new(1, vec![], 1).unwrap();
        let mut w = init_weights(&arch, 0);
        let before = w.layers[0].weights.get(0, 0);
        let mut state = AdamState::new(&arch);
        let mut g = NetGradients::zeros(&arch);
        g.layers[0].weights.set(0, 0, 1.0);
        adam_step(&mut state, &mut w, &g, 0.1, 0.9, 0.999, 1e-8);
        let delta = w.layers[0].weights.get(0, 0) - before;
        assert!((delta + 0.1).abs() < 1e-6, "delta {delta}");
    }

    #[test]
    fn adam_update_decays_after_grad_stops() {
        let arch = NetArchitecture::new(1, vec![], 1).unwrap();
        let mut w = init_weights(&arch, 0);
        let mut state = AdamState::new(&arch);
        let mut g = NetGradients::zeros(&arch);
        g.layers[0].weights.set(0, 0, 1.0);
        for _ in 0..10 {
            adam_step(&mut state, &mut w, &g, 0.01, 0.9, 0.999, 1e-8);
        }
        let zero = NetGradients::zeros(&arch);
        let mut prev_update = f64::INFINITY;
        for _ in 0..60 {
            let before = w.layers[0].weights.get(0, 0);
            adam_step(&mut state, &mut w, &zero, 0.01, 0.9, 0.999, 1e-8);
            let update = (w.layers[0].weights.get(0, 0) - before).abs();
            assert!(update <= prev_update + 1e-15);
            prev_update = update;
        }
        assert!(prev_update < 1e-3);
    }

    fn tiny_dataset(model: &CostModel, seed: u64, n: usize, t: usize) -> Dataset {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let instances: Vec<ProblemInstance> = (0..n)
            .map(|i| {
                instance_1d(
                    &format!("ds-{i}"),
                    0.0,
                    &(0..t)
                        .map(|_| rng.random_range(0.0..1.5))
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        Dataset::from_instances(instances, model).unwrap()
    }

    #[test]
    fn overfit_one_sample_beats_robd() {
        let model = model_1d(5.0);
        let data = tiny_dataset(&model, 41, 1, 8);
        let config = TrainConfig {
            mu: 0.0,
            epochs: 400,
            batch_size: 1,
            learning_rate: 5e-3,
            seed: 7,
            ..TrainConfig::default()
        };
        let report = train_ecl2o(&data, &data, &model, &config).unwrap();
        let params = config.calibrator_params(&model).unwrap();
        let (_, trace) = episode_loss(
            &report.weights,
            &data.instances[0],
            &model,
            &params,
            0.0,
            0.1,
            &data.oracles[0],
        )
        .unwrap();
        let robd = run_expert_episode(&data.instances[0], &model, &robd_params(&model).unwrap())
            .unwrap();
        assert!(
            trace.total_cost() <= robd.total_cost() + 1e-9,
            "trained {} vs robd {}",
            trace.total_cost(),
            robd.total_cost()
        );
        // loss should have dropped substantially from the first epochs
        let early: f64 = report.log[..5].iter().map(|e| e.train_loss).fold(f64::INFINITY, f64::min);
        let late: f64 = report.log[report.log.len() - 5..]
            .iter()
            .map(|e| e.train_loss)
            .fold(f64::INFINITY, f64::min);
        assert!(late <= early);
    }

    #[test]
    fn mu_one_drives_rho_below_threshold() {
        let model = model_1d(5.0);
        let data = tiny_dataset(&model, 43, 4, 6);
        let config = TrainConfig {
            mu: 1.0,
            rho_bar: 0.1,
            epochs: 300,
            batch_size: 4,
            learning_rate: 5e-3,
            seed: 3,
            ..TrainConfig::default()
        };
        let report = train_ecl2o(&data, &data, &model, &config).unwrap();
        let last = report.log.last().unwrap();
        assert!(
            last.val_mean_rho <= 0.1 + 0.05,
            "mean rho {} after mu=1 training",
            last.val_mean_rho
        );
    }

    #[test]
    fn training_is_seed_deterministic() {
        let model = model_1d(5.0);
        let data = tiny_dataset(&model, 45, 6, 5);
        let config = TrainConfig {
            epochs: 5,
            batch_size: 3,
            seed: 11,
            ..TrainConfig::default()
        };
        let a = train_ecl2o(&data, &data, &model, &config).unwrap();
        let b = train_ecl2o(&data, &data, &model, &config).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.best_epoch, b.best_epoch);
    }

    #[test]
    fn lambda3_zero_mu_zero_keeps_initial_weights() {
        let model = model_1d(5.0);
        let data = tiny_dataset(&model, 47, 3, 5);
        let config = TrainConfig {
            mu: 0.0,
            theta: 0.0,
            epochs: 3,
            batch_size: 2,
            seed: 19,
            ..TrainConfig::default()
        };
        let report = train_ecl2o(&data, &data, &model, &config).unwrap();
        let arch = arch_for(&data.instances[0], &config.hidden).unwrap();
        let initial = init_weights(&arch, config.seed);
        assert_eq!(report.weights, initial);
    }

    #[test]
    fn pureml_kappa_zero_loss_is_cost() {
        let model = model_1d(5.0);
        let inst = instance_1d("p0", 0.0, &[1.0, 0.5]);
        let oracle = offline_optimal(&inst, &model).unwrap();
        let arch = NetArchitecture::default_for(1, 1);
        let w = init_weights(&arch, 2);
        let (loss, trace) = pureml_episode_loss(&w, &inst, &model, 0.0, &oracle).unwrap();
        assert!((loss - trace.total_cost()).abs() < 1e-12);
    }

    #[test]
    fn pureml_overfits_one_sample_near_oracle() {
        let model = model_1d(5.0);
        let data = tiny_dataset(&model, 49, 1, 8);
        let config = PureMlConfig {
            kappa: 0.0,
            epochs: 600,
            batch_size: 1,
            learning_rate: 5e-3,
            seed: 23,
            ..PureMlConfig::default()
        };
        let report = train_pureml(&data, &data, &model, &config).unwrap();
        let (_, trace) = pureml_episode_loss(
            &report.weights,
            &data.instances[0],
            &model,
            0.0,
            &data.oracles[0],
        )
        .unwrap();
        let oracle_cost = data.oracles[0].cost;
        assert!(
            trace.total_cost() <= 1.05 * oracle_cost,
            "pureml {} vs oracle {}",
            trace.total_cost(),
            oracle_cost
        );
    }

    #[test]
    fn divergence_reports_epoch() {
        let model = model_1d(5.0);
        let data = tiny_dataset(&model, 53, 3, 5);
        let config = TrainConfig {
            mu: 0.0,
            epochs: 6,
            batch_size: 3,
            learning_rate: 1e9,
            seed: 31,
            ..TrainConfig::default()
        };
        match train_ecl2o(&data, &data, &model, &config) {
            Err(Error::Divergence { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn boundary_optimum_aborts_gradient() {
        let model = model_1d(5.0);
        let inst = instance_1d("box", 0.0, &[2.0, 2.0]);
        let oracle = offline_optimal(&inst, &model).unwrap();
        let arch = NetArchitecture::default_for(1, 1);
        let w = init_weights(&arch, 2);
        let params = CalibratorParams::new(1.0, 0.3, 0.2).unwrap();
        // the box pins the action at its upper face
        let bounds = crate::calibrator::ActionBounds::new(vec![-0.05], vec![0.05]).unwrap();
        match grad_episode_bounded(&w, &inst, &model, &params, 0.0, 0.1, &oracle, &bounds) {
            Err(Error::BoundaryOptimum { step }) => assert!(step >= 1),
            other => panic!("expected boundary abort, got {other:?}"),
        }
        // a box wide enough to keep the optimum interior matches the
        // unconstrained gradient
        let wide = crate::calibrator::ActionBounds::new(vec![-10.0], vec![10.0]).unwrap();
        let bounded =
            grad_episode_bounded(&w, &inst, &model, &params, 0.0, 0.1, &oracle, &wide).unwrap();
        let free = grad_episode(&w, &inst, &model, &params, 0.0, 0.1, &oracle).unwrap();
        for (a, b) in bounded.layers.iter().zip(&free.layers) {
            for (x, y) in a.weights.data().iter().zip(b.weights.data()) {
                assert!((x - y).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn pureml_training_deterministic() {
        let model = model_1d(5.0);
        let data = tiny_dataset(&model, 51, 4, 5);
        let config = PureMlConfig {
            epochs: 4,
            batch_size: 2,
            seed: 29,
            ..PureMlConfig::default()
        };
        let a = train_pureml(&data, &data, &model, &config).unwrap();
        let b = train_pureml(&data, &data, &model, &config).unwrap();
        assert_eq!(a.weights, b.weights);
    }
}
