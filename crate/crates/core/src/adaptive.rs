//! The Beta-distribution timestep policy π_φ(·|x_0) and its
//! likelihood-ratio update.
//!
//! A small MLP maps a clean sample to two raw scalars; softplus plus a floor
//! turns them into Beta parameters (a, b). A draw u ~ Beta(a, b) is mapped to
//! a training timestep with [`discretize`]. After the model update the
//! estimated objective drop Δ̃ rewards the draw through the score function
//! ∇_φ log f(u; a, b), and an entropy bonus keeps the policy from collapsing.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::{Activation, Mlp};
use crate::predictor::{adam_step, AdamState};
use crate::special::{digamma, ln_beta, trigamma};

/// Lower clamp applied to degenerate Beta draws; the upper clamp is 1 − this.
pub const U_CLAMP: f64 = 1e-9;

/// Maps u ∈ (0, 1) to t = min(T, ⌊u·T⌋ + 1).
pub fn discretize(u: f64, steps: usize) -> Result<usize> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Domain(format!("u = {u} is outside (0, 1)")));
    }
    Ok(((u * steps as f64).floor() as usize + 1).min(steps))
}

pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for y > 0.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn check_ab(a: f64, b: f64) -> Result<()> {
    if a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "Beta parameters must be positive, got a = {a}, b = {b}"
        )))
    }
}

/// ln f(u; a, b) = (a−1) ln u + (b−1) ln(1−u) − ln B(a, b).
pub fn beta_log_density(u: f64, a: f64, b: f64) -> Result<f64> {
    check_ab(a, b)?;
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Domain(format!("u = {u} is outside (0, 1)")));
    }
    Ok((a - 1.0) * u.ln() + (b - 1.0) * (-u).ln_1p() - ln_beta(a, b))
}

/// Differential entropy of Beta(a, b).
pub fn beta_entropy(a: f64, b: f64) -> Result<f64> {
    check_ab(a, b)?;
    Ok(
        ln_beta(a, b) - (a - 1.0) * digamma(a) - (b - 1.0) * digamma(b)
            + (a + b - 2.0) * digamma(a + b),
    )
}

/// (∂/∂a, ∂/∂b) of ln f(u; a, b).
pub fn log_density_grad(u: f64, a: f64, b: f64) -> (f64, f64) {
    let s = digamma(a + b);
    (u.ln() - digamma(a) + s, (-u).ln_1p() - digamma(b) + s)
}

/// (∂/∂a, ∂/∂b) of the Beta entropy.
pub fn entropy_grad(a: f64, b: f64) -> (f64, f64) {
    let s = (a + b - 2.0) * trigamma(a + b);
    (-(a - 1.0) * trigamma(a) + s, -(b - 1.0) * trigamma(b) + s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySpec {
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub a_floor: f64,
}

impl Default for PolicySpec {
    fn default() -> Self {
        Self {
            hidden_dims: vec![64, 64],
            activation: Activation::Silu,
            a_floor: 1e-4,
        }
    }
}

/// φ: MLP weights mapping x_0 to raw Beta parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub net: Mlp,
    pub a_floor: f64,
}

impl PolicyParams {
    /// Random hidden layers; the output bias is set so that a = b = 1 when the
    /// last-layer weights vanish, i.e. the policy starts close to uniform.
    pub fn new<R: Rng + ?Sized>(dim: usize, spec: &PolicySpec, rng: &mut R) -> Result<Self> {
        let mut net = Mlp::init(&Self::sizes(dim, spec), spec.activation, rng);
        let last = net.num_layers() - 1;
        let bias = softplus_inv(1.0 - spec.a_floor);
        net.bias_mut(last).iter_mut().for_each(|b| *b = bias);
        Self::from_net(net, spec.a_floor)
    }

    /// All-zero weights: a = b = ln 2 + a_floor for every input.
    pub fn zeros(dim: usize, spec: &PolicySpec) -> Result<Self> {
        Self::from_net(
            Mlp::zeros(&Self::sizes(dim, spec), spec.activation),
            spec.a_floor,
        )
    }

    fn sizes(dim: usize, spec: &PolicySpec) -> Vec<usize> {
        let mut sizes = vec![dim];
        sizes.extend(&spec.hidden_dims);
        sizes.push(2);
        sizes
    }

    pub fn from_net(net: Mlp, a_floor: f64) -> Result<Self> {
        if net.output_dim() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "policy network must output 2 values, has {:?}",
                net.sizes()
            )));
        }
        if !(a_floor > 0.0) {
            return Err(Error::Domain(format!(
                "a_floor must be positive, got {a_floor}"
            )));
        }
        Ok(Self { net, a_floor })
    }

    pub fn dim(&self) -> usize {
        self.net.input_dim()
    }

    fn to_ab(&self, raw: ArrayView1<'_, f64>) -> Result<(f64, f64)> {
        if !(raw[0].is_finite() && raw[1].is_finite()) {
            return Err(Error::NonFinite(format!(
                "policy output ({}, {})",
                raw[0], raw[1]
            )));
        }
        Ok((
            softplus(raw[0]) + self.a_floor,
            softplus(raw[1]) + self.a_floor,
        ))
    }

    /// (a, b) for every row of `x0`.
    pub fn forward_batch(&self, x0: ArrayView2<'_, f64>) -> Result<Vec<(f64, f64)>> {
        if x0.ncols() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "x0 has {} columns, policy expects {}",
                x0.ncols(),
                self.dim()
            )));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("policy input".into()));
        }
        let raw = self.net.forward(x0);
        raw.outer_iter().map(|r| self.to_ab(r)).collect()
    }
}

/// (a, b) = softplus(MLP(x_0)) + a_floor.
pub fn policy_forward(phi: &PolicyParams, x0: ArrayView1<'_, f64>) -> Result<(f64, f64)> {
    let rows = x0.to_owned().insert_axis(ndarray::Axis(0));
    Ok(phi.forward_batch(rows.view())?[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimestepDraw {
    pub a: f64,
    pub b: f64,
    pub u: f64,
    pub t: usize,
    pub log_density: f64,
    /// The raw Beta draw fell outside (U_CLAMP, 1 − U_CLAMP) and was clamped.
    pub clamped: bool,
}

/// u ~ Beta(a, b) as g_a / (g_a + g_b) with independent Gamma draws.
pub fn draw_from_beta<R: Rng + ?Sized>(
    a: f64,
    b: f64,
    steps: usize,
    rng: &mut R,
) -> Result<TimestepDraw> {
    check_ab(a, b)?;
    let ga = Gamma::new(a, 1.0)
        .map_err(|e| Error::Domain(e.to_string()))?
        .sample(rng);
    let gb = Gamma::new(b, 1.0)
        .map_err(|e| Error::Domain(e.to_string()))?
        .sample(rng);
    let raw = ga / (ga + gb);
    let (u, clamped) = if raw.is_finite() && raw > U_CLAMP && raw < 1.0 - U_CLAMP {
        (raw, false)
    } else if raw.is_finite() {
        (raw.clamp(U_CLAMP, 1.0 - U_CLAMP), true)
    } else {
        // both Gamma draws underflowed; fall back to the mean
        ((a / (a + b)).clamp(U_CLAMP, 1.0 - U_CLAMP), true)
    };
    if clamped {
        log::debug!("Beta({a}, {b}) draw {raw} clamped to {u}");
    }
    Ok(TimestepDraw {
        a,
        b,
        u,
        t: discretize(u, steps)?,
        log_density: beta_log_density(u, a, b)?,
        clamped,
    })
}

pub fn draw_timestep<R: Rng + ?Sized>(
    phi: &PolicyParams,
    x0: ArrayView1<'_, f64>,
    steps: usize,
    rng: &mut R,
) -> Result<TimestepDraw> {
    let (a, b) = policy_forward(phi, x0)?;
    draw_from_beta(a, b, steps, rng)
}

/// One draw per row of `x0`, from a single batched policy forward.
pub fn draw_batch<R: Rng + ?Sized>(
    phi: &PolicyParams,
    x0: ArrayView2<'_, f64>,
    steps: usize,
    rng: &mut R,
) -> Result<Vec<TimestepDraw>> {
    phi.forward_batch(x0)?
        .into_iter()
        .map(|(a, b)| draw_from_beta(a, b, steps, rng))
        .collect()
}

/// mean_i [ r·ln f(u_i; a_i, b_i) + ent_coef·H(a_i, b_i) ] under the current φ.
pub fn reinforce_objective(
    phi: &PolicyParams,
    x0: ArrayView2<'_, f64>,
    u: &[f64],
    reward: f64,
    ent_coef: f64,
) -> Result<f64> {
    let ab = phi.forward_batch(x0)?;
    let mut total = 0.0;
    for (&(a, b), &ui) in ab.iter().zip(u) {
        total += reward * beta_log_density(ui, a, b)? + ent_coef * beta_entropy(a, b)?;
    }
    Ok(total / u.len() as f64)
}

/// ∇_φ of [`reinforce_objective`], by the chain rule through softplus and the MLP.
pub fn reinforce_gradient(
    phi: &PolicyParams,
    x0: ArrayView2<'_, f64>,
    u: &[f64],
    reward: f64,
    ent_coef: f64,
) -> Result<Vec<f64>> {
    if x0.nrows() != u.len() || u.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} inputs for {} draws",
            x0.nrows(),
            u.len()
        )));
    }
    let tape = phi.net.forward_tape(x0);
    let n = u.len() as f64;
    let mut g_out = Array2::zeros((u.len(), 2));
    for (i, &ui) in u.iter().enumerate() {
        let raw = tape.output.row(i);
        let (a, b) = phi.to_ab(raw)?;
        let (la, lb) = log_density_grad(ui, a, b);
        let (ha, hb) = entropy_grad(a, b);
        g_out[[i, 0]] = (reward * la + ent_coef * ha) * sigmoid(raw[0]) / n;
        g_out[[i, 1]] = (reward * lb + ent_coef * hb) * sigmoid(raw[1]) / n;
    }
    Ok(phi.net.backward(&tape, g_out.view()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateOutcome {
    pub applied: bool,
    pub grad_norm: f64,
}

/// How an ascent direction is turned into a parameter step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PolicyOptimizer {
    /// φ ← φ + lr·∇_φ J, the update exactly as the likelihood-ratio rule writes it.
    Sgd { lr: f64 },
    /// Bias-corrected Adam on −J.
    Adam(AdamState),
}

impl PolicyOptimizer {
    fn step(&mut self, params: &mut [f64], ascent: &[f64]) {
        match self {
            PolicyOptimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(ascent) {
                    *p += *lr * g;
                }
            }
            PolicyOptimizer::Adam(state) => {
                let descent: Vec<f64> = ascent.iter().map(|g| -g).collect();
                adam_step(params, &descent, state);
            }
        }
    }
}

/// One ascent step on [`reinforce_objective`] for the draws of one mini-batch.
///
/// A non-finite gradient leaves φ (and the optimizer state) untouched and is
/// reported via `applied`.
pub fn reinforce_step(
    phi: &mut PolicyParams,
    x0: ArrayView2<'_, f64>,
    draws: &[TimestepDraw],
    reward: f64,
    ent_coef: f64,
    opt: &mut PolicyOptimizer,
) -> Result<UpdateOutcome> {
    let u: Vec<f64> = draws.iter().map(|d| d.u).collect();
    let grad = match reinforce_gradient(phi, x0, &u, reward, ent_coef) {
        Ok(g) => g,
        Err(Error::NonFinite(msg)) => {
            log::warn!("policy update skipped: {msg}");
            return Ok(UpdateOutcome {
                applied: false,
                grad_norm: f64::NAN,
            });
        }
        Err(e) => return Err(e),
    };
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !norm.is_finite() {
        log::warn!("policy update skipped: gradient norm {norm}");
        return Ok(UpdateOutcome {
            applied: false,
            grad_norm: norm,
        });
    }
    opt.step(phi.net.params_mut(), &grad);
    Ok(UpdateOutcome {
        applied: true,
        grad_norm: norm,
    })
}

/// Plain gradient ascent φ ← φ + lr·∇_φ J for the draws of one mini-batch.
pub fn reinforce_update_batch(
    phi: &mut PolicyParams,
    x0: ArrayView2<'_, f64>,
    draws: &[TimestepDraw],
    reward: f64,
    ent_coef: f64,
    lr: f64,
) -> Result<UpdateOutcome> {
    reinforce_step(
        phi,
        x0,
        draws,
        reward,
        ent_coef,
        &mut PolicyOptimizer::Sgd { lr },
    )
}

/// Single-sample form of [`reinforce_update_batch`].
pub fn reinforce_update(
    phi: &mut PolicyParams,
    x0: ArrayView1<'_, f64>,
    draw: &TimestepDraw,
    delta_tilde: f64,
    ent_coef: f64,
    lr: f64,
) -> Result<UpdateOutcome> {
    let rows = x0.to_owned().insert_axis(ndarray::Axis(0));
    reinforce_update_batch(
        phi,
        rows.view(),
        std::slice::from_ref(draw),
        delta_tilde,
        ent_coef,
        lr,
    )
}

/// Standardises rewards by the mean and standard deviation of the last
/// `window` raw values (the current one included).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardNormalizer {
    window: usize,
    history: VecDeque<f64>,
}

impl RewardNormalizer {
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(2),
            history: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    /// Records `x` and returns its standardised value; 0 until two values
    /// have been seen or when the window has no spread.
    pub fn normalize(&mut self, x: f64) -> f64 {
        if self.history.len() == self.window {
            self.history.pop_front();
        }
        self.history.push_back(x);
        let n = self.history.len();
        if n < 2 {
            return 0.0;
        }
        let mean = self.history.iter().sum::<f64>() / n as f64;
        let var = self.history.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd = var.sqrt();
        if sd > 0.0 && sd.is_finite() {
            (x - mean) / sd
        } else {
            0.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use approx::assert_relative_eq;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn spec() -> PolicySpec {
        PolicySpec {
            hidden_dims: vec![6, 5],
            activation: Activation::Silu,
            a_floor: 1e-4,
        }
    }

    fn normal(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = stream(seed, Stream::Data);
        Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn zero_policy_output() {
        let phi = PolicyParams::zeros(2, &PolicySpec::default()).unwrap();
        let (a, b) = policy_forward(&phi, array![3.0, -1.0].view()).unwrap();
        assert_relative_eq!(a, 2f64.ln() + 1e-4, max_relative = 1e-15);
        assert_eq!(a, b);
        assert_relative_eq!(a, 0.69325, max_relative = 1e-5);
    }

    #[test]
    fn initial_policy_is_near_uniform() {
        let phi =
            PolicyParams::new(2, &PolicySpec::default(), &mut stream(1, Stream::Policy)).unwrap();
        let ab = phi.forward_batch(normal(64, 2, 2).view()).unwrap();
        for (a, b) in ab {
            assert!((a - 1.0).abs() < 0.5 && (b - 1.0).abs() < 0.5, "({a}, {b})");
        }
    }

    #[test]
    fn policy_matches_hand_rolled_forward() {
        let phi = PolicyParams::new(2, &spec(), &mut stream(3, Stream::Policy)).unwrap();
        let x = array![0.4, -1.3];
        let mut h = x.to_vec();
        for l in 0..phi.net.num_layers() {
            let (w, b) = phi.net.layer(l);
            let mut z = b.to_vec();
            for (k, hk) in h.iter().enumerate() {
                for j in 0..z.len() {
                    z[j] += hk * w[[k, j]];
                }
            }
            if l + 1 < phi.net.num_layers() {
                z.iter_mut().for_each(|v| *v *= 1.0 / (1.0 + (-*v).exp()));
            }
            h = z;
        }
        let (a, b) = policy_forward(&phi, x.view()).unwrap();
        assert_relative_eq!(a, (1.0 + h[0].exp()).ln() + 1e-4, max_relative = 1e-13);
        assert_relative_eq!(b, (1.0 + h[1].exp()).ln() + 1e-4, max_relative = 1e-13);
    }

    #[test]
    fn policy_rejects_non_finite_input() {
        let phi = PolicyParams::zeros(2, &spec()).unwrap();
        assert!(policy_forward(&phi, array![f64::NAN, 0.0].view()).is_err());
    }

    #[test]
    fn discretize_examples() {
        assert_eq!(discretize(0.5, 1000).unwrap(), 501);
        assert_eq!(discretize(1e-12, 1000).unwrap(), 1);
        assert_eq!(discretize(0.999, 1000).unwrap(), 1000);
        assert_eq!(discretize(1.0 - 1e-16, 1000).unwrap(), 1000);
        assert!(discretize(0.0, 10).is_err());
        assert!(discretize(1.0, 10).is_err());
    }

    #[test]
    fn log_density_examples() {
        for u in [0.01, 0.3, 0.9] {
            assert!(beta_log_density(u, 1.0, 1.0).unwrap().abs() < 1e-15);
        }
        assert_relative_eq!(
            beta_log_density(0.5, 2.0, 2.0).unwrap(),
            1.5f64.ln(),
            max_relative = 1e-13
        );
        assert_relative_eq!(
            beta_log_density(0.5, 2.0, 2.0).unwrap(),
            0.405465,
            max_relative = 1e-6
        );
        assert!(beta_log_density(0.0, 1.0, 1.0).is_err());
        assert!(beta_log_density(0.5, -1.0, 1.0).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert!(beta_entropy(1.0, 1.0).unwrap().abs() < 1e-14);
        // H(Beta(2,2)) = ln(1/6) + 5/3 − 2·(3/2) … closed form: −0.12509...
        let h = beta_entropy(2.0, 2.0).unwrap();
        assert_relative_eq!(
            h,
            (1.0f64 / 6.0).ln() - 2.0 * (1.0 - 0.5772156649015329)
                + 2.0 * (11.0 / 6.0 - 0.5772156649015329),
            max_relative = 1e-12
        );
        assert!((h + 0.125).abs() < 1e-3);
        let mut prev = h;
        for a in [4.0, 8.0] {
            let e = beta_entropy(a, a).unwrap();
            assert!(e < prev);
            prev = e;
        }
    }

    #[test]
    fn score_example() {
        let (ga, gb) = log_density_grad(0.5, 1.0, 1.0);
        assert_relative_eq!(ga, 0.5f64.ln() + 1.0, max_relative = 1e-13);
        assert_relative_eq!(ga, 0.30685, max_relative = 1e-4);
        assert_eq!(ga, gb);
    }

    #[test]
    fn analytic_partials_match_finite_differences() {
        let mut rng = stream(4, Stream::Probe);
        for _ in 0..50 {
            let a: f64 = rng.random_range(0.3..6.0);
            let b: f64 = rng.random_range(0.3..6.0);
            let u: f64 = rng.random_range(0.02..0.98);
            let h = 1e-6;
            let fd_a = (beta_log_density(u, a + h, b).unwrap()
                - beta_log_density(u, a - h, b).unwrap())
                / (2.0 * h);
            let fd_b = (beta_log_density(u, a, b + h).unwrap()
                - beta_log_density(u, a, b - h).unwrap())
                / (2.0 * h);
            let (ga, gb) = log_density_grad(u, a, b);
            assert!((ga - fd_a).abs() <= 1e-4 * fd_a.abs().max(1e-2));
            assert!((gb - fd_b).abs() <= 1e-4 * fd_b.abs().max(1e-2));
            let fe_a =
                (beta_entropy(a + h, b).unwrap() - beta_entropy(a - h, b).unwrap()) / (2.0 * h);
            let fe_b =
                (beta_entropy(a, b + h).unwrap() - beta_entropy(a, b - h).unwrap()) / (2.0 * h);
            let (ha, hb) = entropy_grad(a, b);
            assert!(
                (ha - fe_a).abs() <= 1e-4 * fe_a.abs().max(1e-2),
                "{a} {b}: {ha} vs {fe_a}"
            );
            assert!((hb - fe_b).abs() <= 1e-4 * fe_b.abs().max(1e-2));
        }
    }

    #[test]
    fn update_gradient_matches_finite_differences() {
        let phi = PolicyParams::new(2, &spec(), &mut stream(5, Stream::Policy)).unwrap();
        let x = normal(3, 2, 6);
        let u = [0.2, 0.55, 0.93];
        let (r, ent) = (0.7, 0.05);
        let grad = reinforce_gradient(&phi, x.view(), &u, r, ent).unwrap();
        for i in 0..phi.net.num_params() {
            let h = 1e-5;
            let mut p = phi.clone();
            p.net.params_mut()[i] += h;
            let mut m = phi.clone();
            m.net.params_mut()[i] -= h;
            let fd = (reinforce_objective(&p, x.view(), &u, r, ent).unwrap()
                - reinforce_objective(&m, x.view(), &u, r, ent).unwrap())
                / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() <= 1e-4 * fd.abs().max(1e-3),
                "param {i}: {fd} vs {}",
                grad[i]
            );
        }
    }

    #[test]
    fn zero_objective_leaves_policy_unchanged() {
        let mut phi = PolicyParams::new(2, &spec(), &mut stream(7, Stream::Policy)).unwrap();
        let before = phi.clone();
        let x = array![0.1, 0.2];
        let d = draw_timestep(&phi, x.view(), 100, &mut stream(8, Stream::Sampler)).unwrap();
        let out = reinforce_update(&mut phi, x.view(), &d, 0.0, 0.0, 0.1).unwrap();
        assert!(out.applied);
        assert_eq!(phi, before);
    }

    #[test]
    fn positive_reward_raises_log_density() {
        let mut rng = stream(9, Stream::Sampler);
        for seed in 0..20 {
            let mut phi = PolicyParams::new(2, &spec(), &mut stream(seed, Stream::Policy)).unwrap();
            let x = normal(1, 2, 100 + seed);
            let d = draw_timestep(&phi, x.row(0), 1000, &mut rng).unwrap();
            reinforce_update(&mut phi, x.row(0), &d, 1.0, 0.0, 1e-3).unwrap();
            let (a, b) = policy_forward(&phi, x.row(0)).unwrap();
            assert!(beta_log_density(d.u, a, b).unwrap() > d.log_density);
        }
    }

    #[test]
    fn non_finite_reward_skips_update() {
        let mut phi = PolicyParams::new(2, &spec(), &mut stream(10, Stream::Policy)).unwrap();
        let before = phi.clone();
        let x = array![0.1, 0.2];
        let d = draw_timestep(&phi, x.view(), 100, &mut stream(8, Stream::Sampler)).unwrap();
        let out = reinforce_update(&mut phi, x.view(), &d, f64::NAN, 0.0, 0.1).unwrap();
        assert!(!out.applied);
        assert_eq!(phi, before);
    }

    #[test]
    fn extreme_parameters_are_clamped() {
        let mut rng = stream(11, Stream::Sampler);
        let mut flagged = 0;
        for _ in 0..200 {
            let d = draw_from_beta(1e-4, 1e-4, 1000, &mut rng).unwrap();
            assert!(d.u >= U_CLAMP && d.u <= 1.0 - U_CLAMP);
            assert!(d.log_density.is_finite());
            flagged += d.clamped as usize;
        }
        assert!(flagged > 0);
    }

    #[test]
    fn reward_normalizer_window() {
        let mut n = RewardNormalizer::new(3);
        assert_eq!(n.normalize(5.0), 0.0);
        assert_relative_eq!(n.normalize(7.0), 1.0 / 2f64.sqrt(), max_relative = 1e-14);
        n.normalize(9.0);
        // window now {7, 9, 11}
        assert_relative_eq!(n.normalize(11.0), 1.0, max_relative = 1e-14);
        assert_eq!(n.len(), 3);
        let mut flat = RewardNormalizer::new(10);
        flat.normalize(2.0);
        assert_eq!(flat.normalize(2.0), 0.0);
    }

    proptest! {
        #[test]
        fn discretize_is_monotone_and_in_range(u1 in 1e-12f64..1.0, u2 in 1e-12f64..1.0, steps in 1usize..5000) {
            prop_assume!(u1 < 1.0 && u2 < 1.0);
            let (t1, t2) = (discretize(u1, steps).unwrap(), discretize(u2, steps).unwrap());
            prop_assert!((1..=steps).contains(&t1));
            if u1 <= u2 { prop_assert!(t1 <= t2); }
        }

        #[test]
        fn policy_parameters_positive(x in proptest::collection::vec(-1e3f64..1e3, 2), seed in 0u64..100) {
            let phi = PolicyParams::new(2, &spec(), &mut stream(seed, Stream::Policy)).unwrap();
            let (a, b) = policy_forward(&phi, ArrayView1::from(&x)).unwrap();
            prop_assert!(a >= 1e-4 && b >= 1e-4);
        }
    }

    #[test]
    fn discretize_is_surjective() {
        let steps = 97;
        let mut seen = vec![false; steps];
        for t in 1..=steps {
            // centre of each bin
            let u = (t as f64 - 0.5) / steps as f64;
            seen[discretize(u, steps).unwrap() - 1] = true;
        }
        assert!(seen.iter().all(|s| *s));
    }
}
