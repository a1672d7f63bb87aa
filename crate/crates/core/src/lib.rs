//! Importance-aware delivery of version updates from energy-harvesting users
//! over a fading multiple-access channel.
//!
//! The crate covers the system model, the MAC rate region, a small barrier
//! solver, four scheduling policies (finite-horizon MDP, offline convex
//! oracle, imitation-learned MLP, greedy) and a Monte Carlo harness that
//! compares them on common sample paths.

pub mod config;
pub mod error;
pub mod greedy;
pub mod mdp;
pub mod model;
pub mod nn;
pub mod offline;
pub mod rate_region;
pub mod sim;
pub mod solver;

pub use error::{Error, Result};
