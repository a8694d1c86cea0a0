//! Individualised red-light warning: macroscopic traffic estimation and
//! prediction, a condensed model-predictive advisory, a kinematic baseline
//! and a microscopic intersection simulator.

pub mod engine;
pub mod estimation;
pub mod prediction;
pub mod qp_core;
pub mod signal;
pub mod sim;
pub mod traffic_flow;
pub mod vehicle;
pub mod warning_mpc;
