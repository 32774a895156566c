//! A desk-scale diffusion training lab.
//!
//! The crate trains small ε-prediction diffusion models and compares ways of
//! choosing the training timestep: uniform sampling, fixed heuristic weights,
//! a log-normal proposal, a variance-proportional table, and an adaptive
//! Beta-distribution policy trained online to maximise the estimated drop of
//! the variational bound after each parameter update.
//!
//! Module map:
//! - [`schedules`]: noise schedules and derived constants.
//! - [`diffusion`]: forward noising, per-timestep losses, the bound, sampling.
//! - [`predictor`]: the ε-network, Adam, clipping, EMA.
//! - [`baselines`]: uniform / Min-SNR / P2 / log-normal samplers.
//! - [`adaptive`]: the Beta policy and its likelihood-ratio update.
//! - [`delta`]: objective-drop sweeps, the sweep queue and F-statistic selection.
//! - [`profiler`]: gradient-variance profiles, interdependence runs, cost model.
//! - [`harness`]: datasets, the training loop, metrics and persistence.

pub mod adaptive;
pub mod baselines;
pub mod delta;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod mlp;
pub mod predictor;
pub mod profiler;
pub mod rng;
pub mod schedules;
pub mod special;

pub use error::{Error, Result};
