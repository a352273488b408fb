//! Quickest intervention for change-point diffusion processes.
//!
//! An agent watches a discrete observation stream whose distribution shifts
//! at an unknown geometric change-point and escalates through intervention
//! levels to contain it. This crate provides:
//!
//! - [`model`]: problem specification, assumption checks, the reference family;
//! - [`belief`]: posterior dynamics of the change indicator;
//! - [`grid_solver`]: grid value iteration for the belief MDP and a finite-horizon variant;
//! - [`local_approx`]: the small-perturbation approximation, closed-form thresholds and costs;
//! - [`policies`]: threshold, grid-optimal, detect-then-intervene and oracle policies;
//! - [`simulator`]: seeded Monte Carlo evaluation, regret sweeps and the fixed-horizon experiment;
//! - [`cli`]: configuration and command implementations behind the `qi` binary.

pub mod belief;
pub mod cli;
pub mod error;
pub mod grid_solver;
pub mod local_approx;
pub mod model;
pub mod policies;
pub mod simulator;

pub use error::{Error, Result};
pub use grid_solver::{GridConfig, GridSolution, ThresholdPolicy};
pub use model::ProblemSpec;
