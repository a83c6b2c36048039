//! Group-gifting simulation and causal-inference toolkit.
//!
//! The crate has three layers:
//!
//! * the red-packet amount **splitter** (the randomization device) and its
//!   analytic moments,
//! * a **population** generator plus an agent-based **simulator** that
//!   produces gift event streams with known ground-truth contagion
//!   parameters and realistic confounders (homophily, temporal bursts,
//!   festivals),
//! * the estimation machinery: spontaneous-packet **panel** construction,
//!   stratified fixed-effects OLS with Poisson cluster **bootstrap**,
//!   exact one-to-many **matching**, and hypothesis-testing utilities
//!   (two-sample KS, per-stratum randomization checks, Benjamini-Hochberg).
//!
//! Everything is deterministic per seed: parallel work derives independent
//! substreams keyed by task indices, so results never depend on the worker
//! count or schedule.

pub mod error;
pub mod estimator;
pub mod graph;
pub mod matcher;
pub mod money;
pub mod panel;
pub mod population;
pub mod rng;
pub mod simulator;
pub mod splitter;
pub mod stats;

pub use error::{Error, Result};
pub use money::MoneyCents;
pub use rng::RngStream;
