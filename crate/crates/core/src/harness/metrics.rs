//! Run records, the tracked bound and the energy distance.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::diffusion::{per_timestep_loss, DataBatch};
use crate::error::{Error, Result};
use crate::predictor::EpsPredictor;
use crate::rng::substream;
use crate::schedules::NoiseSchedule;

/// One row of `metrics.csv`. Optional fields are empty on iterations
/// without a sampler update or without a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub k: u64,
    pub mean_t: f64,
    pub train_loss: f64,
    pub delta_tilde: Option<f64>,
    /// All-timestep Δ on the same mini-batch and noise (when tracked).
    pub delta_full: Option<f64>,
    /// Selected timesteps joined by ';'.
    pub subset: Option<String>,
    pub fallback: Option<bool>,
    pub mean_a: Option<f64>,
    pub mean_b: Option<f64>,
    pub entropy: Option<f64>,
    /// Single-sample predictor forwards spent on Alg. 2 at this iteration.
    pub fwd_rows_delta: u64,
}

/// One row of `eval.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub k: u64,
    pub tracked_vlb: f64,
    pub best_vlb: f64,
    pub energy_distance: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub iterations: Vec<IterRecord>,
    pub evals: Vec<EvalRecord>,
}

impl RunMetrics {
    pub fn sampler_updates(&self) -> usize {
        self.iterations
            .iter()
            .filter(|r| r.delta_tilde.is_some())
            .count()
    }

    pub fn final_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }

    /// First evaluated iteration whose tracked bound is ≤ `target`.
    pub fn first_k_reaching(&self, target: f64) -> Option<u64> {
        self.evals
            .iter()
            .find(|e| e.tracked_vlb <= target)
            .map(|e| e.k)
    }

    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
        for r in &self.iterations {
            w.serialize(r)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("eval.csv"))?;
        for r in &self.evals {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A fixed probe set with one frozen noise block per timestep.
#[derive(Debug, Clone)]
pub struct VlbProbe {
    pub x0: DataBatch,
    /// `noise[t - 1]` has one row per probe.
    pub noise: Vec<Array2<f64>>,
}

impl VlbProbe {
    pub fn new(x0: DataBatch, steps: usize, seed: u64) -> Self {
        let noise = (1..=steps)
            .map(|t| crate::delta::tau_noise(seed, t, x0.len(), x0.dim()))
            .collect();
        Self { x0, noise }
    }

    pub fn from_table(x0: DataBatch, noise: Vec<Array2<f64>>) -> Result<Self> {
        if noise.iter().any(|n| n.dim() != (x0.len(), x0.dim())) {
            return Err(Error::ShapeMismatch(
                "noise table does not match probes".into(),
            ));
        }
        Ok(Self { x0, noise })
    }
}

/// Mean over probes of Σ_t c_t·‖ε − ε̂_θ(x_t, t)‖² with the frozen noises.
pub fn tracked_vlb(theta: &EpsPredictor, s: &NoiseSchedule, probe: &VlbProbe) -> Result<f64> {
    if probe.noise.len() != s.steps() {
        return Err(Error::ShapeMismatch(format!(
            "{} noise blocks for T = {}",
            probe.noise.len(),
            s.steps()
        )));
    }
    let mut total = 0.0;
    for (i, eps) in probe.noise.iter().enumerate() {
        total += per_timestep_loss(theta, s, &probe.x0, eps.view(), i + 1, true)?;
    }
    Ok(total)
}

fn mean_pair_distance(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    let mut total = 0.0;
    for x in a.outer_iter() {
        for y in b.outer_iter() {
            total += x
                .iter()
                .zip(y.iter())
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
        }
    }
    total / (a.nrows() * b.nrows()) as f64
}

/// 2E‖X − Y‖ − E‖X − X′‖ − E‖Y − Y′‖ over all pairs (V-statistic, ≥ 0).
pub fn energy_distance(gen: ArrayView2<'_, f64>, reference: ArrayView2<'_, f64>) -> Result<f64> {
    if gen.nrows() == 0 || reference.nrows() == 0 || gen.ncols() != reference.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "energy distance of {:?} and {:?}",
            gen.dim(),
            reference.dim()
        )));
    }
    let e = 2.0 * mean_pair_distance(gen, reference)
        - mean_pair_distance(gen, gen)
        - mean_pair_distance(reference, reference);
    Ok(e.max(0.0))
}

/// Seed of the probe noise table for a run seed.
pub fn probe_noise_seed(seed: u64) -> u64 {
    use rand::Rng;
    substream(seed, u64::MAX).random()
}
