//! Non-adaptive timestep selection: uniform sampling, the Min-SNR and P2
//! weightings, and the logit-normal proposal.
//!
//! Weighting heuristics are produced as [`WeightTable`]s in loss-weight mode.
//! [`weights_to_probs`] turns any table into a sampling distribution, so every
//! heuristic can act either as a loss multiplier or as a proposal.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adaptive::discretize;
use crate::error::{Error, Result};
use crate::schedules::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableMode {
    LossWeight,
    SamplingProb,
}

/// One non-negative entry per timestep; `w[t - 1]` belongs to t.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable {
    w: Vec<f64>,
    mode: TableMode,
    /// Inverse-CDF table, filled for sampling distributions.
    cdf: Vec<f64>,
}

impl WeightTable {
    pub fn new(w: Vec<f64>, mode: TableMode) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::ShapeMismatch(
                "weight table needs at least one entry".into(),
            ));
        }
        if let Some(v) = w.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Domain(format!(
                "weight {v} is not a finite non-negative number"
            )));
        }
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            return Err(Error::ZeroWeights);
        }
        let cdf = match mode {
            TableMode::LossWeight => Vec::new(),
            TableMode::SamplingProb => {
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::Domain(format!(
                        "sampling table sums to {total}, not 1"
                    )));
                }
                let mut acc = 0.0;
                w.iter()
                    .map(|p| {
                        acc += p;
                        acc
                    })
                    .collect()
            }
        };
        Ok(Self { w, mode, cdf })
    }

    pub fn mode(&self) -> TableMode {
        self.mode
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn steps(&self) -> usize {
        self.w.len()
    }

    /// Entry for timestep t (1-based).
    pub fn at(&self, t: usize) -> f64 {
        self.w[t - 1]
    }
}

/// t uniform on {1, …, T}.
pub fn uniform_sample<R: Rng + ?Sized>(steps: usize, rng: &mut R) -> usize {
    rng.random_range(1..=steps)
}

/// Min-SNR weights for ε-prediction: w_t = min(snr_t, γ) / snr_t.
pub fn weights_min_snr(s: &NoiseSchedule, gamma: f64) -> Result<WeightTable> {
    if !(gamma > 0.0) {
        return Err(Error::Domain(format!(
            "min-snr gamma must be positive, got {gamma}"
        )));
    }
    let w = s.snrs().iter().map(|&snr| snr.min(gamma) / snr).collect();
    WeightTable::new(w, TableMode::LossWeight)
}

/// P2 weights: w_t = 1 / (k + snr_t)^γ.
pub fn weights_p2(s: &NoiseSchedule, k: f64, gamma: f64) -> Result<WeightTable> {
    if !(k >= 0.0) {
        return Err(Error::Domain(format!("p2 k must be non-negative, got {k}")));
    }
    let w = s.snrs().iter().map(|&snr| (k + snr).powf(-gamma)).collect();
    WeightTable::new(w, TableMode::LossWeight)
}

/// p_t = w_t / Σ w.
pub fn weights_to_probs(w: &WeightTable) -> Result<WeightTable> {
    let total: f64 = w.w.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroWeights);
    }
    let p: Vec<f64> = w.w.iter().map(|v| v / total).collect();
    WeightTable::new(p, TableMode::SamplingProb)
}

/// Inverse-CDF draw from a sampling table.
pub fn sample_categorical<R: Rng + ?Sized>(p: &WeightTable, rng: &mut R) -> Result<usize> {
    if p.mode != TableMode::SamplingProb {
        return Err(Error::WrongTableMode);
    }
    let u: f64 = rng.random::<f64>() * p.cdf[p.cdf.len() - 1];
    // first index whose cumulative mass exceeds u; zero-mass entries are skipped
    let idx = p.cdf.partition_point(|c| *c <= u).min(p.cdf.len() - 1);
    let idx = (idx..p.w.len()).find(|&i| p.w[i] > 0.0).unwrap_or_else(|| {
        (0..idx)
            .rev()
            .find(|&i| p.w[i] > 0.0)
            .expect("table has positive mass")
    });
    Ok(idx + 1)
}

/// Log-normal proposal: z ~ N(μ, σ²), u = sigmoid(z), t = discretize(u, T).
pub fn sample_lognormal_sigmoid<R: Rng + ?Sized>(
    steps: usize,
    mu: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<usize> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!(
            "log-normal sigma must be positive, got {sigma}"
        )));
    }
    let z = Normal::new(mu, sigma)
        .map_err(|e| Error::Domain(e.to_string()))?
        .sample(rng);
    lognormal_timestep(steps, z)
}

/// The deterministic tail of [`sample_lognormal_sigmoid`] for a given z.
pub fn lognormal_timestep(steps: usize, z: f64) -> Result<usize> {
    let u = (1.0 / (1.0 + (-z).exp())).clamp(1e-12, 1.0 - 1e-12);
    discretize(u, steps)
}
