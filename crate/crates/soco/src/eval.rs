//! Run policies over datasets and compute the ratio metrics: normalized
//! average cost, empirical competitive ratio, tail cost ratios, and the
//! L-constrained regret.

use std::io::Write;

use rayon::prelude::*;

use crate::baselines::{switch_step, ActivePolicy, SwitchState};
use crate::calibrator::{calibrate_step, CalibratorParams};
use crate::cost::CostModel;
use crate::error::{Error, Result};
use crate::net::{forward, PolicyWeights};
use crate::oracle::{l_constrained_optimal, offline_optimal, OracleSolution};
use crate::types::{EpisodeTrace, EvalResult, ProblemInstance};

/// Instances with an oracle cost below `RATIO_FLOOR_FACTOR * median oracle
/// cost` are excluded from ratio metrics; their ratios would be dominated by
/// solver noise.
const RATIO_FLOOR_FACTOR: f64 = 1e-9;

/// What to play on each episode.
#[derive(Debug, Clone)]
pub enum Policy<'a> {
    /// Offline optimal actions replayed as a trace.
    Oracle,
    Robd,
    Greedy,
    FollowThePrediction { weights: &'a PolicyWeights },
    PureMl { weights: &'a PolicyWeights },
    MlaRobd {
        weights: &'a PolicyWeights,
        params: CalibratorParams,
    },
    EcL2o {
        weights: &'a PolicyWeights,
        params: CalibratorParams,
    },
    Switch {
        pureml: &'a PolicyWeights,
        robd: CalibratorParams,
        gamma: f64,
        gamma_growth: f64,
        initial: ActivePolicy,
    },
}

impl Policy<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Oracle => "oracle",
            Policy::Robd => "robd",
            Policy::Greedy => "greedy",
            Policy::FollowThePrediction { .. } => "ftp",
            Policy::PureMl { .. } => "pureml",
            Policy::MlaRobd { .. } => "mla-robd",
            Policy::EcL2o { .. } => "ecl2o",
            Policy::Switch { .. } => "switch",
        }
    }
}

/// Build a trace from externally supplied predictions and played actions.
pub fn trace_from_actions(
    model: &CostModel,
    instance: &ProblemInstance,
    predictions: &[Vec<f64>],
    actions: &[Vec<f64>],
) -> Result<EpisodeTrace> {
    let t_len = instance.horizon();
    if actions.len() != t_len || predictions.len() != t_len {
        return Err(Error::DimensionMismatch {
            context: "trace_from_actions length",
            expected: t_len,
            actual: actions.len().min(predictions.len()),
        });
    }
    let mut hitting = Vec::with_capacity(t_len);
    let mut switching = Vec::with_capacity(t_len);
    let mut prev = instance.x0.as_slice();
    for (t, x) in actions.iter().enumerate() {
        hitting.push(model.hitting_cost(x, &instance.contexts[t])?);
        switching.push(model.switching_cost(x, prev)?);
        prev = x;
    }
    EpisodeTrace::new(predictions.to_vec(), actions.to_vec(), hitting, switching)
}

/// Roll the net plus calibrator over an episode.
pub fn run_calibrated_episode(
    weights: &PolicyWeights,
    instance: &ProblemInstance,
    model: &CostModel,
    params: &CalibratorParams,
) -> Result<EpisodeTrace> {
    let mut predictions = Vec::with_capacity(instance.horizon());
    let mut actions = Vec::with_capacity(instance.horizon());
    let mut x_prev = instance.x0.clone();
    for y in &instance.contexts {
        let (x_tilde, _) = forward(weights, y, &x_prev)?;
        let x = calibrate_step(model, params, y, &x_prev, &x_tilde, None)?;
        predictions.push(x_tilde);
        actions.push(x.clone());
        x_prev = x;
    }
    trace_from_actions(model, instance, &predictions, &actions)
}

/// Calibrate externally supplied predictions (for example oracle actions).
pub fn run_calibrated_with_predictions(
    model: &CostModel,
    params: &CalibratorParams,
    instance: &ProblemInstance,
    predictions: &[Vec<f64>],
) -> Result<EpisodeTrace> {
    if predictions.len() != instance.horizon() {
        return Err(Error::DimensionMismatch {
            context: "external predictions length",
            expected: instance.horizon(),
            actual: predictions.len(),
        });
    }
    let mut actions = Vec::with_capacity(instance.horizon());
    let mut x_prev = instance.x0.clone();
    for (y, x_tilde) in instance.contexts.iter().zip(predictions) {
        let x = calibrate_step(model, params, y, &x_prev, x_tilde, None)?;
        actions.push(x.clone());
        x_prev = x;
    }
    trace_from_actions(model, instance, predictions, &actions)
}

/// Calibrated episode without predictions (R-OBD, greedy). The prediction
/// slot is fed the previous action; `lambda3 = 0` ignores it.
pub fn run_expert_episode(
    instance: &ProblemInstance,
    model: &CostModel,
    params: &CalibratorParams,
) -> Result<EpisodeTrace> {
    let mut predictions = Vec::with_capacity(instance.horizon());
    let mut actions = Vec::with_capacity(instance.horizon());
    let mut x_prev = instance.x0.clone();
    for y in &instance.contexts {
        let x = calibrate_step(model, params, y, &x_prev, &x_prev, None)?;
        predictions.push(x_prev.clone());
        actions.push(x.clone());
        x_prev = x;
    }
    trace_from_actions(model, instance, &predictions, &actions)
}

/// Play the raw net output, recurring on its own actions.
pub fn run_pureml_episode(
    weights: &PolicyWeights,
    instance: &ProblemInstance,
    model: &CostModel,
) -> Result<EpisodeTrace> {
    let mut predictions = Vec::with_capacity(instance.horizon());
    let mut x_prev = instance.x0.clone();
    for y in &instance.contexts {
        let (x_tilde, _) = forward(weights, y, &x_prev)?;
        predictions.push(x_tilde.clone());
        x_prev = x_tilde;
    }
    trace_from_actions(model, instance, &predictions.clone(), &predictions)
}

pub fn run_policy(
    policy: &Policy,
    instance: &ProblemInstance,
    model: &CostModel,
) -> Result<EpisodeTrace> {
    match policy {
        Policy::Oracle => {
            let sol = offline_optimal(instance, model)?;
            trace_from_actions(model, instance, &sol.actions, &sol.actions)
        }
        Policy::Robd => {
            let params = crate::baselines::robd_params(model)?;
            run_expert_episode(instance, model, &params)
        }
        Policy::Greedy => {
            run_expert_episode(instance, model, &crate::baselines::greedy_params())
        }
        Policy::FollowThePrediction { weights } => run_calibrated_episode(
            weights,
            instance,
            model,
            &crate::baselines::follow_the_prediction_params(),
        ),
        Policy::PureMl { weights } => run_pureml_episode(weights, instance, model),
        Policy::MlaRobd { weights, params } | Policy::EcL2o { weights, params } => {
            run_calibrated_episode(weights, instance, model, params)
        }
        Policy::Switch {
            pureml,
            robd,
            gamma,
            gamma_growth,
            initial,
        } => {
            let mut state = SwitchState::new(*initial, *gamma, *gamma_growth)?;
            let mut predictions = Vec::with_capacity(instance.horizon());
            let mut actions = Vec::with_capacity(instance.horizon());
            let mut x_prev = instance.x0.clone();
            for y in &instance.contexts {
                let (x_tilde, _) = forward(pureml, y, &x_prev)?;
                let x = switch_step(&mut state, model, y, &x_prev, pureml, robd)?;
                predictions.push(x_tilde);
                actions.push(x.clone());
                x_prev = x;
            }
            trace_from_actions(model, instance, &predictions, &actions)
        }
    }
}

/// Nearest-rank percentile of a sorted slice, `p` in (0, 100].
pub fn percentile_nearest_rank(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Evaluate a policy over a dataset.
///
/// With `chain_x0` each instance starts from the previous instance's final
/// played action (continuous testing); the per-instance oracle is solved for
/// the chained instance the policy actually faced.
pub fn evaluate(
    policy: &Policy,
    instances: &[ProblemInstance],
    model: &CostModel,
    chain_x0: bool,
    percentiles: &[f64],
) -> Result<EvalResult> {
    if instances.is_empty() {
        return Err(Error::InvalidParameter("empty dataset".into()));
    }
    let runs: Vec<(EpisodeTrace, OracleSolution, String)> = if chain_x0 {
        let mut out = Vec::with_capacity(instances.len());
        let mut x0: Option<Vec<f64>> = None;
        for inst in instances {
            let faced = match &x0 {
                Some(prev) => inst.with_x0(prev.clone()),
                None => inst.clone(),
            };
            let trace = run_policy(policy, &faced, model)?;
            let oracle = offline_optimal(&faced, model)?;
            x0 = Some(trace.actions.last().unwrap().clone());
            out.push((trace, oracle, faced.id.clone()));
        }
        out
    } else {
        instances
            .par_iter()
            .map(|inst| -> Result<_> {
                let trace = run_policy(policy, inst, model)?;
                let oracle = offline_optimal(inst, model)?;
                Ok((trace, oracle, inst.id.clone()))
            })
            .collect::<Result<Vec<_>>>()?
    };

    let mut oracle_costs: Vec<f64> = runs.iter().map(|(_, o, _)| o.cost).collect();
    oracle_costs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if oracle_costs.len() % 2 == 1 {
        oracle_costs[oracle_costs.len() / 2]
    } else {
        0.5 * (oracle_costs[oracle_costs.len() / 2 - 1] + oracle_costs[oracle_costs.len() / 2])
    };
    let floor = RATIO_FLOOR_FACTOR * median;

    let mut ratios = Vec::new();
    let mut policy_cost_sum = 0.0;
    let mut oracle_cost_sum = 0.0;
    let mut excluded = 0usize;
    for (trace, oracle, id) in &runs {
        if oracle.cost < floor || oracle.cost <= 0.0 {
            excluded += 1;
            continue;
        }
        let ratio = trace.total_cost() / oracle.cost;
        if ratio < 1.0 - 1e-8 {
            return Err(Error::RatioBelowOne {
                ratio,
                id: id.clone(),
            });
        }
        ratios.push(ratio);
        policy_cost_sum += trace.total_cost();
        oracle_cost_sum += oracle.cost;
    }
    if ratios.is_empty() {
        return Err(Error::AllInstancesExcluded {
            count: runs.len(),
        });
    }

    let n = ratios.len() as f64;
    let avg_cost = policy_cost_sum / n;
    let normalized_avg_cost = policy_cost_sum / oracle_cost_sum;
    let mut sorted = ratios.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let empirical_cr = *sorted.last().unwrap();
    let tail_ratios = percentiles
        .iter()
        .map(|p| (*p, percentile_nearest_rank(&sorted, *p)))
        .collect();

    Ok(EvalResult {
        avg_cost,
        normalized_avg_cost,
        empirical_cr,
        tail_ratios,
        per_instance_ratios: ratios,
        excluded,
    })
}

/// Trace cost minus the L-constrained oracle cost.
pub fn l_constrained_regret(
    trace: &EpisodeTrace,
    instance: &ProblemInstance,
    model: &CostModel,
    budget: f64,
) -> Result<f64> {
    let sol = l_constrained_optimal(instance, model, budget)?;
    Ok(trace.total_cost() - sol.cost)
}

fn percentile_label(p: f64) -> String {
    let s = format!("{p}");
    format!("p{}", s.replace('.', "_"))
}

/// Metrics CSV: `policy,avg_cost,norm_avg,emp_cr,<p...>,excluded`.
pub fn write_metrics_csv<W: Write>(
    w: &mut W,
    rows: &[(String, EvalResult)],
    percentiles: &[f64],
) -> Result<()> {
    let mut header = String::from("policy,avg_cost,norm_avg,emp_cr");
    for p in percentiles {
        header.push(',');
        header.push_str(&percentile_label(*p));
    }
    header.push_str(",excluded");
    writeln!(w, "{header}")?;
    for (name, res) in rows {
        let mut line = format!(
            "{},{},{},{}",
            name, res.avg_cost, res.normalized_avg_cost, res.empirical_cr
        );
        for p in percentiles {
            let v = res
                .tail_ratios
                .iter()
                .find(|(q, _)| q == p)
                .map(|(_, v)| *v)
                .unwrap_or(f64::NAN);
            line.push_str(&format!(",{v}"));
        }
        line.push_str(&format!(",{}", res.excluded));
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// One row per instance for ratio plots.
pub fn write_per_instance_csv<W: Write>(
    w: &mut W,
    ids: &[String],
    result: &EvalResult,
) -> Result<()> {
    writeln!(w, "instance,ratio")?;
    for (id, r) in ids.iter().zip(&result.per_instance_ratios) {
        writeln!(w, "{id},{r}")?;
    }
    Ok(())
}
