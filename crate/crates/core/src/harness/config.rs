//! Experiment configuration: one JSON document, unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adaptive::PolicySpec;
use crate::error::{Error, Result};
use crate::mlp::Activation;
use crate::predictor::PredictorSpec;
use crate::schedules::{NoiseSchedule, ReverseVariance, ScheduleKind};

/// Environment variable that overrides the global seed of a loaded config.
pub const SEED_ENV: &str = "TSLAB_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    GaussMix,
    SwissRoll,
    Checkerboard,
    TinyImages,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown dataset kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Training-set size.
    pub size: usize,
    /// Dataset seed; the global seed when absent.
    pub seed: Option<u64>,
    /// gauss_mix: number of modes, evenly spaced on a ring.
    pub modes: usize,
    /// gauss_mix: ring radius (0 puts every mode at the origin).
    pub radius: f64,
    /// gauss_mix: per-mode standard deviation; noise level for the others.
    pub std: f64,
    /// tiny_images: side length of the square images.
    pub image_side: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::GaussMix,
            size: 20_000,
            seed: None,
            modes: 8,
            radius: 2.0,
            std: 0.1,
            image_side: 4,
        }
    }
}

impl DatasetSpec {
    pub fn dim(&self) -> usize {
        match self.kind {
            DatasetKind::TinyImages => self.image_side * self.image_side,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub reverse_variance: ReverseVariance,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            reverse_variance: ReverseVariance::FixedLarge,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(
            self.kind,
            self.steps,
            self.beta_start,
            self.beta_end,
            self.reverse_variance,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Uniform,
    MinSnr,
    P2,
    LogNormal,
    Adaptive,
    VarianceProportional,
}

/// Whether a weighting heuristic multiplies the loss or becomes a proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerRole {
    #[default]
    LossWeight,
    SamplingProb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    /// min_snr / p2 only.
    pub role: SamplerRole,
    pub min_snr_gamma: f64,
    pub p2_k: f64,
    pub p2_gamma: f64,
    pub log_normal_mu: f64,
    pub log_normal_sigma: f64,
    /// variance_proportional: uniform warm-up iterations before profiling.
    pub profile_after: u64,
    /// variance_proportional: re-profile every this many iterations (0 = never).
    pub profile_every: u64,
    pub profile_grid: usize,
    pub profile_n: usize,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Uniform,
            role: SamplerRole::LossWeight,
            min_snr_gamma: 5.0,
            p2_k: 1.0,
            p2_gamma: 1.0,
            log_normal_mu: 0.0,
            log_normal_sigma: 1.0,
            profile_after: 782,
            profile_every: 0,
            profile_grid: 50,
            profile_n: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSpec {
    pub lr: f64,
    pub grad_clip: f64,
    pub ema_decay: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            grad_clip: 1.0,
            ema_decay: 0.999,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Use {T/4, T/2, 3T/4} while the queue is too short.
    #[default]
    Quartiles,
    /// Skip the policy update while the queue is too short.
    Skip,
}

/// Optimizer applied to the policy's ascent direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyOptimizerKind {
    /// φ ← φ + γ·r·∇(log π + c·H), the update as written.
    #[default]
    Sgd,
    /// Adam on the same ascent direction.
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptiveSpec {
    /// Policy learning rate; schedule-dependent default when absent.
    pub lr: Option<f64>,
    pub optimizer: PolicyOptimizerKind,
    pub ent_coef: f64,
    pub f_s: u64,
    pub subset_size: usize,
    pub queue_capacity: usize,
    pub a_floor: f64,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    /// c_τ-weight the per-timestep drops.
    pub weighted: bool,
    pub fallback: Fallback,
    pub reward_window: usize,
    /// Also compute the all-timestep Δ on every update event (diagnostic).
    pub track_full_delta: bool,
}

impl Default for AdaptiveSpec {
    fn default() -> Self {
        Self {
            lr: None,
            optimizer: PolicyOptimizerKind::Sgd,
            ent_coef: 1e-2,
            f_s: 40,
            subset_size: 3,
            queue_capacity: 20,
            a_floor: 1e-4,
            hidden_dims: vec![64, 64],
            activation: Activation::Silu,
            weighted: true,
            fallback: Fallback::Quartiles,
            reward_window: 100,
            track_full_delta: false,
        }
    }
}

impl AdaptiveSpec {
    /// 1e-2 for linear/quadratic schedules, 1e-3 for cosine, unless set.
    pub fn resolved_lr(&self, kind: ScheduleKind) -> f64 {
        self.lr.unwrap_or(match kind {
            ScheduleKind::Cosine => 1e-3,
            ScheduleKind::Linear | ScheduleKind::Quadratic => 1e-2,
        })
    }

    pub fn policy_spec(&self) -> PolicySpec {
        PolicySpec {
            hidden_dims: self.hidden_dims.clone(),
            activation: self.activation,
            a_floor: self.a_floor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    /// Evaluate every this many iterations (0 = only at the end).
    pub every: u64,
    /// Probe samples for the tracked bound.
    pub probes: usize,
    /// Generated and held-out samples for the energy distance (0 disables it).
    pub gen_samples: usize,
    /// Compute the energy distance every this many iterations (0 = only at the end).
    pub energy_every: u64,
    /// Evaluate the EMA parameters rather than the raw ones.
    pub use_ema: bool,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            every: 500,
            probes: 64,
            gen_samples: 1000,
            energy_every: 0,
            use_ema: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub schedule: ScheduleSpec,
    pub predictor: PredictorSpec,
    pub sampler: SamplerSpec,
    pub optimizer: OptimizerSpec,
    pub adaptive: AdaptiveSpec,
    pub batch_size: usize,
    /// Training budget K.
    pub iterations: u64,
    pub eval: EvalSpec,
    /// Where CSVs and the checkpoint go; nothing is written when absent.
    pub out_dir: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetSpec::default(),
            schedule: ScheduleSpec::default(),
            predictor: PredictorSpec::default(),
            sampler: SamplerSpec::default(),
            optimizer: OptimizerSpec::default(),
            adaptive: AdaptiveSpec::default(),
            batch_size: 128,
            iterations: 30_000,
            eval: EvalSpec::default(),
            out_dir: None,
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl ExperimentConfig {
    /// The reference toy setting: 8-mode ring, T = 1000 linear, batch 128,
    /// Adam 2e-4, K = 30000.
    pub fn reference() -> Self {
        Self::default()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies the seed override from [`SEED_ENV`].
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json(&std::fs::read_to_string(path)?)?;
        cfg.apply_env_seed()?;
        Ok(cfg)
    }

    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an integer")))?;
        }
        Ok(())
    }

    pub fn dataset_seed(&self) -> u64 {
        self.dataset.seed.unwrap_or(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        check(self.iterations >= 1, || {
            "iterations must be at least 1".into()
        })?;
        check(self.batch_size >= 1, || {
            "batch_size must be at least 1".into()
        })?;
        check(self.dataset.size >= 1, || {
            "dataset.size must be at least 1".into()
        })?;
        check(self.dataset.modes >= 1, || {
            "dataset.modes must be at least 1".into()
        })?;
        check(
            self.dataset.std >= 0.0 && self.dataset.radius >= 0.0,
            || "dataset radius/std must be non-negative".into(),
        )?;
        check(self.dataset.image_side >= 2, || {
            "dataset.image_side must be at least 2".into()
        })?;
        self.schedule.build()?;
        check(
            !self.predictor.hidden_dims.is_empty() && self.predictor.time_embed_dim >= 2,
            || "predictor needs hidden layers and an embedding of at least 2".into(),
        )?;
        check(
            self.optimizer.lr > 0.0 && self.optimizer.grad_clip > 0.0,
            || "optimizer lr and grad_clip must be positive".into(),
        )?;
        check((0.0..1.0).contains(&self.optimizer.ema_decay), || {
            "ema_decay must lie in [0, 1)".into()
        })?;
        check(self.sampler.log_normal_sigma > 0.0, || {
            "log_normal_sigma must be positive".into()
        })?;
        check(
            self.sampler.profile_grid >= 1 && self.sampler.profile_n >= 2,
            || "profile_grid ≥ 1 and profile_n ≥ 2 required".into(),
        )?;
        let a = &self.adaptive;
        check(a.f_s >= 1, || "adaptive.f_s must be at least 1".into())?;
        check(
            a.subset_size >= 1 && a.subset_size <= self.schedule.steps,
            || "adaptive.subset_size must lie in 1..=T".into(),
        )?;
        check(a.queue_capacity >= 1, || {
            "adaptive.queue_capacity must be at least 1".into()
        })?;
        check(a.a_floor > 0.0, || {
            "adaptive.a_floor must be positive".into()
        })?;
        check(
            a.ent_coef >= 0.0 && a.resolved_lr(self.schedule.kind) >= 0.0,
            || "adaptive lr/ent_coef must be non-negative".into(),
        )?;
        check(a.reward_window >= 2, || {
            "adaptive.reward_window must be at least 2".into()
        })?;
        check(self.eval.probes >= 1, || {
            "eval.probes must be at least 1".into()
        })?;
        Ok(())
    }
}
