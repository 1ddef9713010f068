//! Long-running randomized checks, ignored by default:
//! `cargo test -p soco --test nightly -- --ignored`

mod common;

use common::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use soco::calibrator::CalibratorParams;
use soco::net::{init_weights, NetArchitecture, NetGradients};
use soco::oracle::offline_optimal;
use soco::train::{episode_loss, grad_episode};

/// The end-to-end gradient against finite differences over 100 random
/// configurations of model, calibrator weights, horizon, and net seed.
#[test]
#[ignore]
fn grad_episode_fd_100_random_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6e67);
    let mut checked = 0;
    let mut attempts = 0;
    while checked < 100 && attempts < 400 {
        attempts += 1;
        let model = tracking_model_1d(rng.random_range(0.5..8.0));
        let horizon = rng.random_range(2..=6);
        let inst = random_instance(&mut rng, 1, horizon, 1.5);
        let oracle = offline_optimal(&inst, &model).unwrap();
        if oracle.cost < 1e-3 {
            continue;
        }
        let lambda1 = rng.random_range(0.3..1.0);
        let params = CalibratorParams::new(
            lambda1,
            rng.random_range(0.0..1.5),
            rng.random_range(0.0..1.5),
        )
        .unwrap();
        let mu = rng.random_range(0.0..1.0);
        let rho_bar = rng.random_range(0.01..0.5);
        let arch = NetArchitecture::default_for(1, 1);
        let weights = init_weights(&arch, rng.random());

        let (loss_at_nominal, trace) =
            episode_loss(&weights, &inst, &model, &params, mu, rho_bar, &oracle).unwrap();
        let rho =
            soco::oracle::prediction_error_rho(&trace.predictions, &oracle, 0.0).unwrap();
        if (rho - rho_bar).abs() < 1e-3 {
            continue;
        }
        let mut near_kink = false;
        let mut x_prev = inst.x0.clone();
        for y in &inst.contexts {
            let (out, tape) = soco::net::forward(&weights, y, &x_prev).unwrap();
            let hidden = tape.pre_activations.len() - 1;
            if tape.pre_activations[..hidden]
                .iter()
                .any(|z| z.iter().any(|v| v.abs() < 1e-4))
            {
                near_kink = true;
                break;
            }
            x_prev =
                soco::calibrator::calibrate_step(&model, &params, y, &x_prev, &out, None)
                    .unwrap();
        }
        if near_kink {
            continue;
        }

        let analytic =
            grad_episode(&weights, &inst, &model, &params, mu, rho_bar, &oracle).unwrap();
        let h = 1e-6;
        let mut fd = NetGradients::zeros(&arch);
        for l in 0..weights.layers.len() {
            for idx in 0..weights.layers[l].weights.data().len() {
                let mut wp = weights.clone();
                wp.layers[l].weights.data_mut()[idx] += h;
                let mut wm = weights.clone();
                wm.layers[l].weights.data_mut()[idx] -= h;
                let lp = episode_loss(&wp, &inst, &model, &params, mu, rho_bar, &oracle)
                    .unwrap()
                    .0;
                let lm = episode_loss(&wm, &inst, &model, &params, mu, rho_bar, &oracle)
                    .unwrap()
                    .0;
                fd.layers[l].weights.data_mut()[idx] = (lp - lm) / (2.0 * h);
            }
        }
        // central differences carry cancellation noise around
        // eps * |loss| / h, so the comparison floor scales with the loss
        let floor = 1e-5 * (1.0 + loss_at_nominal.abs());
        for l in 0..fd.layers.len() {
            for (a, f) in analytic.layers[l]
                .weights
                .data()
                .iter()
                .zip(fd.layers[l].weights.data())
            {
                let denom = a.abs().max(f.abs()).max(floor);
                assert!(
                    ((a - f) / denom).abs() < 1e-4,
                    "config {checked}: analytic {a} vs fd {f}"
                );
            }
        }
        checked += 1;
    }
    assert!(checked == 100, "only {checked} configs checked");
}
