//! Day-to-day commuter simulation.
//!
//! Agents repeatedly choose a departure time through a single bottleneck, or
//! one of two congested routes. Each day's choices are loaded onto the network,
//! outcomes go into each agent's memory, and the population is compared with
//! the analytic equilibria. Choices come from a rule-based policy, a scripted
//! replay, or a chat model behind a recording gateway.
//!
//! The numeric core (`traffic_sim`, `equilibrium`, `metrics::emd_to_uniform`)
//! is generic over the scalar; the aliases below fix it to `f64` for the
//! engine and to exact rationals for the route split.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent;
pub mod engine;
pub mod equilibrium;
pub mod gateway;
pub mod metrics;
pub mod policy;
pub mod prompt;
pub mod scalar;
pub mod scenario;
pub mod time;
pub mod traffic_sim;

use num_rational::Ratio;

pub use scalar::{Field, Scalar};

pub type Decision = traffic_sim::TravelDecision<f64>;
pub type Outcome = traffic_sim::TravelOutcome<f64>;
pub type Schedule = traffic_sim::ScheduleModel<f64>;
pub type Corridor = traffic_sim::BottleneckModel<f64>;
pub type Route = traffic_sim::LinearRoute<f64>;
pub type VickreyWindow = equilibrium::VickreyBenchmark<f64>;
pub type WardropSplit = equilibrium::WardropBenchmark<f64>;
pub type ExactRoute = traffic_sim::LinearRoute<Ratio<i64>>;
pub type ExactWardropSplit = equilibrium::WardropBenchmark<Ratio<i64>>;
