//! Robust multi-agent signal control workbench on a 3x3 urban grid.
//!
//! The crate bundles everything needed to reproduce the three-stage pipeline
//! at desk scale: a deterministic 1 s-step microsimulator on a signalized
//! 3x3 grid, origin-destination demand scenarios with convex mixing, small
//! dense policy networks with manual gradients, the three training drivers
//! (baseline controller, worst-case demand estimator, robust fine-tuning),
//! and an evaluation harness that produces per-group metrics and
//! relative-change tables.

pub mod checks;
pub mod cli;
pub mod config;
pub mod control;
pub mod demand;
pub mod eval;
pub mod grid;
pub mod obs;
pub mod policy;
pub mod sim;
pub mod train;

pub use grid::{GridSpec, Movement, MovementClass, Network, Phase, SignalState};
