//! Versioned JSON checkpoints.
//!
//! Layout (version 1): a single JSON object with
//! - `version`: format version,
//! - `k`: completed training iterations,
//! - `config`: the full [`ExperimentConfig`] of the run,
//! - `theta`: `{dim, steps, time_embed_dim, net: {sizes, activation, params}}`,
//!   where `params` is the flat parameter vector, layer by layer, each layer
//!   a row-major `sizes[l] × sizes[l+1]` weight matrix followed by its bias,
//! - `ema`: `{decay, shadow, updates}` with `shadow` in the same layout,
//! - `adam`: `{m, v, step, lr, beta1, beta2, eps}`,
//! - `phi`: the policy network in the same `net` layout plus `a_floor`, or null.
//!
//! Floats are written with round-trip precision, so loading restores every
//! parameter bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adaptive::PolicyParams;
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::predictor::{AdamState, Ema, EpsPredictor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub k: u64,
    pub config: ExperimentConfig,
    pub theta: EpsPredictor,
    pub ema: Ema,
    pub adam: AdamState,
    pub phi: Option<PolicyParams>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == CHECKPOINT_VERSION as u64 => {}
            other => {
                return Err(Error::Checkpoint(format!(
                    "unsupported checkpoint version {other:?}"
                )))
            }
        }
        let ck: Self =
            serde_json::from_value(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.ema.shadow.len() != ck.theta.num_params() || ck.adam.m.len() != ck.theta.num_params()
        {
            return Err(Error::Checkpoint(
                "optimizer state does not match the network".into(),
            ));
        }
        Ok(ck)
    }

    /// The predictor used for evaluation and generation: EMA weights when the
    /// run evaluates them, the raw weights otherwise. Has its own counter.
    pub fn eval_model(&self) -> Result<EpsPredictor> {
        eval_model(&self.theta, &self.ema, self.config.eval.use_ema)
    }
}

pub(crate) fn eval_model(theta: &EpsPredictor, ema: &Ema, use_ema: bool) -> Result<EpsPredictor> {
    let mut net = theta.net().clone();
    if use_ema {
        net.set_params(ema.shadow.clone());
    }
    EpsPredictor::from_net(
        net,
        theta.dim(),
        theta.steps(),
        theta.net().input_dim() - theta.dim(),
    )
}
