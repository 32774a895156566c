//! The ε-prediction network ε_θ(x_t, t) and its optimizer.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_noise, DataBatch};
use crate::error::{Error, Result};
use crate::mlp::{Activation, Mlp};
use crate::schedules::NoiseSchedule;

/// Sinusoidal features of t at geometrically spaced frequencies.
///
/// The position is rescaled to `1000·t/T` so that the frequency band does not
/// depend on the chain length. The first half of the output holds sines, the
/// second half cosines.
pub fn time_embedding(t: usize, steps: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Domain(format!(
            "time embedding width must be even, got {dim}"
        )));
    }
    let half = dim / 2;
    let pos = t as f64 * 1000.0 / steps as f64;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let (s, c) = (pos * freq).sin_cos();
        out[k] = s;
        out[half + k] = c;
    }
    Ok(out)
}

/// Counts rows pushed through the predictor, shared by all snapshots of one model.
#[derive(Debug, Default)]
pub struct ForwardCounter {
    calls: AtomicU64,
    rows: AtomicU64,
}

impl ForwardCounter {
    fn record(&self, rows: usize) {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.rows.fetch_add(rows as u64, Ordering::Relaxed);
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    /// Single-sample forward passes evaluated so far.
    pub fn rows(&self) -> u64 {
        self.rows.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorSpec {
    pub hidden_dims: Vec<usize>,
    pub time_embed_dim: usize,
    pub activation: Activation,
}

impl Default for PredictorSpec {
    fn default() -> Self {
        Self {
            hidden_dims: vec![128, 128],
            time_embed_dim: 64,
            activation: Activation::Silu,
        }
    }
}

/// ε_θ: an MLP on `concat(x_t, time_embedding(t))`.
#[derive(Debug, Clone)]
pub struct EpsPredictor {
    net: Mlp,
    dim: usize,
    steps: usize,
    embed_dim: usize,
    embed: Array2<f64>,
    counter: Arc<ForwardCounter>,
}

/// Serialized form; the embedding table is rebuilt on load.
#[derive(Serialize, Deserialize)]
struct PredictorRepr {
    dim: usize,
    steps: usize,
    time_embed_dim: usize,
    net: Mlp,
}

impl Serialize for EpsPredictor {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        PredictorRepr {
            dim: self.dim,
            steps: self.steps,
            time_embed_dim: self.embed_dim,
            net: self.net.clone(),
        }
        .serialize(ser)
    }
}

impl<'de> Deserialize<'de> for EpsPredictor {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let r = PredictorRepr::deserialize(de)?;
        EpsPredictor::from_net(r.net, r.dim, r.steps, r.time_embed_dim)
            .map_err(serde::de::Error::custom)
    }
}

impl EpsPredictor {
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        steps: usize,
        spec: &PredictorSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let net = Mlp::init(&Self::layer_sizes(dim, spec), spec.activation, rng);
        Self::from_net(net, dim, steps, spec.time_embed_dim)
    }

    /// All-zero weights; predicts ε̂ ≡ 0.
    pub fn zeros(dim: usize, steps: usize, spec: &PredictorSpec) -> Result<Self> {
        let net = Mlp::zeros(&Self::layer_sizes(dim, spec), spec.activation);
        Self::from_net(net, dim, steps, spec.time_embed_dim)
    }

    fn layer_sizes(dim: usize, spec: &PredictorSpec) -> Vec<usize> {
        let mut sizes = vec![dim + spec.time_embed_dim];
        sizes.extend(&spec.hidden_dims);
        sizes.push(dim);
        sizes
    }

    pub fn from_net(net: Mlp, dim: usize, steps: usize, embed_dim: usize) -> Result<Self> {
        if net.input_dim() != dim + embed_dim || net.output_dim() != dim {
            return Err(Error::ShapeMismatch(format!(
                "network {:?} does not map dim {dim} + embedding {embed_dim} to dim {dim}",
                net.sizes()
            )));
        }
        let mut embed = Array2::zeros((steps + 1, embed_dim));
        for t in 0..=steps {
            let e = time_embedding(t, steps, embed_dim)?;
            embed.row_mut(t).assign(&ndarray::ArrayView1::from(&e));
        }
        Ok(Self {
            net,
            dim,
            steps,
            embed_dim,
            embed,
            counter: Arc::new(ForwardCounter::default()),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn params(&self) -> &[f64] {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.net.params_mut()
    }

    pub fn set_params(&mut self, params: Vec<f64>) {
        self.net.set_params(params);
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }

    pub fn counter(&self) -> &ForwardCounter {
        &self.counter
    }

    fn inputs(&self, xt: ArrayView2<'_, f64>, t: &[usize]) -> Result<Array2<f64>> {
        if xt.ncols() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "x_t has {} columns, model dim is {}",
                xt.ncols(),
                self.dim
            )));
        }
        if xt.nrows() != t.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} rows but {} timesteps",
                xt.nrows(),
                t.len()
            )));
        }
        let mut input = Array2::zeros((xt.nrows(), self.dim + self.embed_dim));
        input.slice_mut(s![.., ..self.dim]).assign(&xt);
        for (i, &ti) in t.iter().enumerate() {
            if ti == 0 || ti > self.steps {
                return Err(Error::TimestepOutOfRange {
                    t: ti,
                    steps: self.steps,
                });
            }
            input
                .slice_mut(s![i, self.dim..])
                .assign(&self.embed.row(ti));
        }
        Ok(input)
    }

    /// ε̂ = ε_θ(x_t, t), one timestep per row.
    pub fn predict_eps(&self, xt: ArrayView2<'_, f64>, t: &[usize]) -> Result<Array2<f64>> {
        let input = self.inputs(xt, t)?;
        self.counter.record(t.len());
        Ok(self.net.forward(input.view()))
    }

    /// Mean over the batch of `w_i ‖ε_i − ε̂_i‖²` and its exact parameter gradient.
    ///
    /// `weights = None` gives the plain ε-MSE objective.
    pub fn loss_and_grad(
        &self,
        s: &NoiseSchedule,
        batch: &DataBatch,
        eps: ArrayView2<'_, f64>,
        t: &[usize],
        weights: Option<&[f64]>,
    ) -> Result<(f64, Vec<f64>)> {
        let (residual, tape, w) = self.residual(s, batch, eps, t, weights)?;
        let n = batch.len() as f64;
        let loss = residual
            .outer_iter()
            .zip(&w)
            .map(|(r, wi)| wi * r.dot(&r))
            .sum::<f64>()
            / n;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss {loss}")));
        }
        let mut g_out = residual;
        for (mut row, wi) in g_out.outer_iter_mut().zip(&w) {
            row *= 2.0 * wi / n;
        }
        Ok((loss, self.net.backward(&tape, g_out.view())))
    }

    /// Exact gradient of each sample's own term `w_i ‖ε_i − ε̂_i‖²`.
    pub fn per_sample_grads(
        &self,
        s: &NoiseSchedule,
        batch: &DataBatch,
        eps: ArrayView2<'_, f64>,
        t: &[usize],
        weights: Option<&[f64]>,
    ) -> Result<Vec<Vec<f64>>> {
        let (residual, tape, w) = self.residual(s, batch, eps, t, weights)?;
        let mut g_out = residual;
        for (mut row, wi) in g_out.outer_iter_mut().zip(&w) {
            row *= 2.0 * wi;
        }
        Ok(self.net.per_sample_backward(&tape, g_out.view()))
    }

    /// ε̂ − ε for the noised batch, plus the forward tape.
    fn residual(
        &self,
        s: &NoiseSchedule,
        batch: &DataBatch,
        eps: ArrayView2<'_, f64>,
        t: &[usize],
        weights: Option<&[f64]>,
    ) -> Result<(Array2<f64>, crate::mlp::Tape, Vec<f64>)> {
        let noised = forward_noise(s, batch, t, eps)?;
        let w = match weights {
            Some(w) if w.len() != t.len() => {
                return Err(Error::ShapeMismatch(format!(
                    "{} weights for {} samples",
                    w.len(),
                    t.len()
                )))
            }
            Some(w) => w.to_vec(),
            None => vec![1.0; t.len()],
        };
        let input = self.inputs(noised.xt.view(), t)?;
        self.counter.record(t.len());
        let tape = self.net.forward_tape(input.view());
        let residual = &tape.output - &eps;
        Ok((residual, tape, w))
    }
}

/// Rescales `grad` in place so its Euclidean norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64, eps: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self.eps = eps;
        self
    }
}

/// One bias-corrected Adam step, in place.
pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState) {
    assert_eq!(params.len(), grad.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
}

/// Exponential moving average of the parameters, used only for generation.
///
/// The decay is warmed up as `min(decay, (1 + n) / (10 + n))` after n updates
/// so the average does not remember the initialisation for tens of thousands
/// of steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ema {
    pub decay: f64,
    pub shadow: Vec<f64>,
    pub updates: u64,
}

impl Ema {
    pub fn new(decay: f64, params: &[f64]) -> Self {
        Self {
            decay,
            shadow: params.to_vec(),
            updates: 0,
        }
    }

    pub fn update(&mut self, params: &[f64]) {
        let n = self.updates as f64;
        let d = self.decay.min((1.0 + n) / (10.0 + n));
        for (s, p) in self.shadow.iter_mut().zip(params) {
            *s = d * *s + (1.0 - d) * p;
        }
        self.updates += 1;
    }
}
