//! Shared domain types: problem instances, episode traces, evaluation results.

use std::io::Write;

use crate::error::{Error, Result};

/// One episode's worth of offline information: the initial action and the
/// context revealed at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    pub id: String,
    pub x0: Vec<f64>,
    pub contexts: Vec<Vec<f64>>,
}

impl ProblemInstance {
    pub fn new(id: impl Into<String>, x0: Vec<f64>, contexts: Vec<Vec<f64>>) -> Result<Self> {
        if contexts.is_empty() {
            return Err(Error::InvalidParameter(
                "instance needs at least one step".into(),
            ));
        }
        if x0.is_empty() {
            return Err(Error::InvalidParameter("x0 must be non-empty".into()));
        }
        if !x0.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { what: "x0".into() });
        }
        let q = contexts[0].len();
        for (t, y) in contexts.iter().enumerate() {
            if y.len() != q {
                return Err(Error::DimensionMismatch {
                    context: "ProblemInstance contexts",
                    expected: q,
                    actual: y.len(),
                });
            }
            if !y.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("context at step {}", t + 1),
                });
            }
        }
        Ok(ProblemInstance {
            id: id.into(),
            x0,
            contexts,
        })
    }

    pub fn horizon(&self) -> usize {
        self.contexts.len()
    }

    pub fn action_dim(&self) -> usize {
        self.x0.len()
    }

    pub fn context_dim(&self) -> usize {
        self.contexts[0].len()
    }

    /// Same episode restarted from a different initial action.
    pub fn with_x0(&self, x0: Vec<f64>) -> Self {
        ProblemInstance {
            id: self.id.clone(),
            x0,
            contexts: self.contexts.clone(),
        }
    }
}

/// Per-step record of a played episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub predictions: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub hitting_costs: Vec<f64>,
    pub switching_costs: Vec<f64>,
}

impl EpisodeTrace {
    pub fn new(
        predictions: Vec<Vec<f64>>,
        actions: Vec<Vec<f64>>,
        mut hitting_costs: Vec<f64>,
        mut switching_costs: Vec<f64>,
    ) -> Result<Self> {
        let t = actions.len();
        if predictions.len() != t || hitting_costs.len() != t || switching_costs.len() != t {
            return Err(Error::DimensionMismatch {
                context: "EpisodeTrace sequences",
                expected: t,
                actual: predictions
                    .len()
                    .min(hitting_costs.len())
                    .min(switching_costs.len()),
            });
        }
        for c in hitting_costs.iter_mut().chain(switching_costs.iter_mut()) {
            if !c.is_finite() {
                return Err(Error::NonFinite {
                    what: "per-step cost".into(),
                });
            }
            if *c < -1e-12 {
                return Err(Error::InvalidParameter(format!(
                    "per-step costs must be non-negative, got {c}"
                )));
            }
            // round-off from quadratic forms can leave a tiny negative
            if *c < 0.0 {
                *c = 0.0;
            }
        }
        Ok(EpisodeTrace {
            predictions,
            actions,
            hitting_costs,
            switching_costs,
        })
    }

    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn total_cost(&self) -> f64 {
        total_cost(self)
    }

    pub fn total_switching_cost(&self) -> f64 {
        self.switching_costs.iter().sum()
    }

    /// CSV with columns `step,x_tilde,x,f_cost,c_cost`. Vector-valued fields
    /// are joined with `;`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,x_tilde,x,f_cost,c_cost")?;
        for t in 0..self.horizon() {
            writeln!(
                w,
                "{},{},{},{},{}",
                t + 1,
                join_vec(&self.predictions[t]),
                join_vec(&self.actions[t]),
                self.hitting_costs[t],
                self.switching_costs[t]
            )?;
        }
        Ok(())
    }
}

fn join_vec(v: &[f64]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

/// Sum of all hitting and switching entries of a trace.
pub fn total_cost(trace: &EpisodeTrace) -> f64 {
    trace.hitting_costs.iter().sum::<f64>() + trace.switching_costs.iter().sum::<f64>()
}

/// Aggregate metrics of one policy over a dataset.
#[derive(Debug, Clone)]
pub struct EvalResult {
    pub avg_cost: f64,
    /// Average cost divided by the oracle's average cost.
    pub normalized_avg_cost: f64,
    /// Max per-instance cost ratio.
    pub empirical_cr: f64,
    /// (percentile, ratio) pairs, nearest-rank.
    pub tail_ratios: Vec<(f64, f64)>,
    pub per_instance_ratios: Vec<f64>,
    /// Instances dropped because the oracle cost was below the floor.
    pub excluded: usize,
}
