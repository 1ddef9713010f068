//! Online convex optimization with switching costs.
//!
//! An online agent pays a strongly convex hitting cost `f(x_t, y_t)` plus a
//! squared Mahalanobis switching cost `c(x_t, x_{t-1})` each step. This crate
//! implements:
//!
//! - a differentiable per-step expert calibrator that pulls a learned
//!   prediction toward robust behavior ([`calibrator`]),
//! - exact offline and budget-constrained oracles ([`oracle`]),
//! - a small recurrent relu optimizer with hand-written backprop ([`net`]),
//! - end-to-end training through the calibrator via implicit Jacobians and
//!   backpropagation through time ([`train`]),
//! - closed-form competitive-ratio and regret bounds plus the adversarial
//!   prediction construction ([`bounds`]),
//! - expert and switching baselines ([`baselines`]),
//! - a datacenter demand-response data pipeline ([`demand`]), and
//! - the evaluation harness with tail-ratio metrics ([`eval`]).

// index loops over matrix/trajectory blocks read better than iterator chains
#![allow(clippy::needless_range_loop)]

pub mod baselines;
pub mod bounds;
pub mod calibrator;
pub mod cost;
pub mod demand;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod net;
pub mod oracle;
pub mod train;
pub mod types;

pub use error::{Error, Result};
