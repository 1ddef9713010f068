//! Shared helpers for integration tests: instance generators and independent
//! brute-force minimizers used as oracles against the closed-form solvers.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use soco::cost::{CostModel, SwitchingCost};
use soco::linalg::Mat;
use soco::types::ProblemInstance;

pub fn tracking_model_1d(q: f64) -> CostModel {
    CostModel::quadratic_tracking(SwitchingCost::isotropic(1, q).unwrap())
}

/// The case-study model: f = 1/2 ||x - y||^2, c = (alpha/2) ||dx||^2.
pub fn case_study_model(dim: usize, alpha: f64) -> CostModel {
    CostModel::tracking_with_alpha(dim, alpha).unwrap()
}

pub fn random_spd_model(rng: &mut ChaCha8Rng, dim: usize) -> CostModel {
    let rows: Vec<Vec<f64>> = (0..dim)
        .map(|_| (0..dim).map(|_| rng.random_range(-0.7..0.7)).collect())
        .collect();
    let b = Mat::from_rows(&rows).unwrap();
    let mut q = b.transpose().matmul(&b);
    for i in 0..dim {
        q.set(i, i, q.get(i, i) + 0.6);
    }
    CostModel::quadratic_tracking(SwitchingCost::new(q).unwrap())
}

pub fn random_instance(
    rng: &mut ChaCha8Rng,
    dim: usize,
    horizon: usize,
    spread: f64,
) -> ProblemInstance {
    ProblemInstance::new(
        format!("rand-{}", rng.random::<u32>()),
        (0..dim).map(|_| rng.random_range(-spread..spread)).collect(),
        (0..horizon)
            .map(|_| (0..dim).map(|_| rng.random_range(-spread..spread)).collect())
            .collect(),
    )
    .unwrap()
}

/// Golden-section search over a bracket; unimodal objectives only.
pub fn golden_section_min(mut lo: f64, mut hi: f64, iters: usize, f: impl Fn(f64) -> f64) -> f64 {
    let phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - phi * (hi - lo);
    let mut d = lo + phi * (hi - lo);
    for _ in 0..iters {
        if f(c) < f(d) {
            hi = d;
        } else {
            lo = c;
        }
        c = hi - phi * (hi - lo);
        d = lo + phi * (hi - lo);
    }
    0.5 * (lo + hi)
}

/// Refined grid search over a T-step scalar trajectory.
pub fn grid_search_trajectory(
    model: &CostModel,
    instance: &ProblemInstance,
    half_width: f64,
    levels: usize,
) -> (Vec<f64>, f64) {
    let horizon = instance.horizon();
    let cost_of = |xs: &[f64]| -> f64 {
        let mut total = 0.0;
        let mut prev = instance.x0[0];
        for (t, x) in xs.iter().enumerate() {
            total += model.hitting_cost(&[*x], &instance.contexts[t]).unwrap();
            total += model.switching_cost(&[*x], &[prev]).unwrap();
            prev = *x;
        }
        total
    };
    let mut center = vec![0.0; horizon];
    let mut width = half_width;
    let mut best = (center.clone(), f64::INFINITY);
    let n = 10usize;
    for _ in 0..levels {
        let mut idx = vec![0usize; horizon];
        loop {
            let xs: Vec<f64> = (0..horizon)
                .map(|t| center[t] - width + 2.0 * width * idx[t] as f64 / n as f64)
                .collect();
            let c = cost_of(&xs);
            if c < best.1 {
                best = (xs, c);
            }
            // odometer increment
            let mut pos = 0;
            loop {
                if pos == horizon {
                    break;
                }
                idx[pos] += 1;
                if idx[pos] <= n {
                    break;
                }
                idx[pos] = 0;
                pos += 1;
            }
            if pos == horizon {
                break;
            }
        }
        center = best.0.clone();
        width *= 2.5 / n as f64;
    }
    best
}
