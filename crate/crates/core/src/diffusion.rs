//! Forward noising, per-timestep objectives, the Gaussian-KL form of the
//! variational bound, and ancestral generation.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::predictor::EpsPredictor;
use crate::schedules::NoiseSchedule;

/// Clean samples x_0, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBatch {
    x0: Array2<f64>,
}

impl DataBatch {
    pub fn new(x0: Array2<f64>) -> Result<Self> {
        if x0.nrows() == 0 || x0.ncols() == 0 {
            return Err(Error::ShapeMismatch("data batch must be non-empty".into()));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("data batch entry".into()));
        }
        Ok(Self { x0 })
    }

    pub fn from_row(row: ArrayView1<'_, f64>) -> Result<Self> {
        Self::new(row.to_owned().insert_axis(Axis(0)))
    }

    pub fn len(&self) -> usize {
        self.x0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x0.ncols()
    }

    pub fn x0(&self) -> ArrayView2<'_, f64> {
        self.x0.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.x0.row(i)
    }

    pub fn select(&self, rows: &[usize]) -> DataBatch {
        DataBatch {
            x0: self.x0.select(Axis(0), rows),
        }
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.x0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisedBatch {
    pub xt: Array2<f64>,
    pub eps: Array2<f64>,
    pub t: Vec<usize>,
}

/// x_t = √ᾱ_t·x_0 + √(1 − ᾱ_t)·ε, row by row.
pub fn forward_noise(
    s: &NoiseSchedule,
    x0: &DataBatch,
    t: &[usize],
    eps: ArrayView2<'_, f64>,
) -> Result<NoisedBatch> {
    if eps.dim() != x0.x0.dim() || t.len() != x0.len() {
        return Err(Error::ShapeMismatch(format!(
            "x0 {:?}, eps {:?}, {} timesteps",
            x0.x0.dim(),
            eps.dim(),
            t.len()
        )));
    }
    let mut xt = Array2::zeros(x0.x0.dim());
    for (i, &ti) in t.iter().enumerate() {
        s.check_timestep(ti)?;
        let ab = s.alpha_bar(ti);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut row = xt.row_mut(i);
        for j in 0..x0.dim() {
            row[j] = a * x0.x0[[i, j]] + b * eps[[i, j]];
        }
    }
    Ok(NoisedBatch {
        xt,
        eps: eps.to_owned(),
        t: t.to_vec(),
    })
}

/// Mean over rows of ‖ε − ε̂‖² (summed over coordinates).
pub fn eps_loss(eps_hat: ArrayView2<'_, f64>, eps: ArrayView2<'_, f64>) -> Result<f64> {
    if eps_hat.dim() != eps.dim() || eps.nrows() == 0 {
        return Err(Error::ShapeMismatch(format!(
            "eps_hat {:?} vs eps {:?}",
            eps_hat.dim(),
            eps.dim()
        )));
    }
    let total: f64 = eps_hat
        .iter()
        .zip(eps.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(total / eps.nrows() as f64)
}

/// Per-row squared error ‖ε_i − ε̂_i‖².
pub fn row_losses(eps_hat: ArrayView2<'_, f64>, eps: ArrayView2<'_, f64>) -> Vec<f64> {
    eps_hat
        .outer_iter()
        .zip(eps.outer_iter())
        .map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum())
        .collect()
}

/// L_t on a batch sharing one timestep; multiplied by c_t when `weighted`.
pub fn per_timestep_loss(
    theta: &EpsPredictor,
    s: &NoiseSchedule,
    x0: &DataBatch,
    eps: ArrayView2<'_, f64>,
    t: usize,
    weighted: bool,
) -> Result<f64> {
    let ts = vec![t; x0.len()];
    let noised = forward_noise(s, x0, &ts, eps)?;
    let eps_hat = theta.predict_eps(noised.xt.view(), &ts)?;
    let loss = eps_loss(eps_hat.view(), eps)?;
    Ok(if weighted { s.c(t) * loss } else { loss })
}

/// Mean and variance of q(x_{t−1} | x_t, x_0).
///
/// At t = 1 the posterior collapses onto x_0 with variance 0.
pub fn posterior_params(
    s: &NoiseSchedule,
    x0: ArrayView1<'_, f64>,
    xt: ArrayView1<'_, f64>,
    t: usize,
) -> Result<(Array1<f64>, f64)> {
    s.check_timestep(t)?;
    if x0.len() != xt.len() {
        return Err(Error::ShapeMismatch(format!(
            "x0 has {} entries, xt has {}",
            x0.len(),
            xt.len()
        )));
    }
    let ab = s.alpha_bar(t);
    let ab_prev = s.alpha_bar_prev(t);
    let beta = s.beta(t);
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let ct = s.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let mean = Array1::from_iter(x0.iter().zip(xt.iter()).map(|(a, b)| c0 * a + ct * b));
    Ok((mean, s.posterior_variance(t)))
}

/// μ_θ(x_t, t) = (x_t − β_t/√(1 − ᾱ_t)·ε̂) / √α_t.
pub fn reverse_mean(
    s: &NoiseSchedule,
    xt: ArrayView1<'_, f64>,
    eps_hat: ArrayView1<'_, f64>,
    t: usize,
) -> Array1<f64> {
    let k = s.beta(t) / (1.0 - s.alpha_bar(t)).sqrt();
    let inv = 1.0 / s.alpha(t).sqrt();
    Array1::from_iter(
        xt.iter()
            .zip(eps_hat.iter())
            .map(|(x, e)| (x - k * e) * inv),
    )
}

/// Per-timestep pieces of Σ_t KL(q(x_{t−1}|x_t,x_0) ‖ p_θ(x_{t−1}|x_t)).
#[derive(Debug, Clone, PartialEq)]
pub struct VlbTerms {
    /// ‖μ̃_t − μ_θ‖² / (2σ_t²), the part that depends on θ.
    pub mean_terms: Vec<f64>,
    /// (dim/2)·(β̃_t/σ_t² − 1 − ln(β̃_t/σ_t²)); zero at t = 1, where only the
    /// mean term is kept.
    pub variance_terms: Vec<f64>,
}

impl VlbTerms {
    pub fn mean_part(&self) -> f64 {
        self.mean_terms.iter().sum()
    }

    pub fn total(&self) -> f64 {
        self.mean_part() + self.variance_terms.iter().sum::<f64>()
    }
}

/// The bound as a sum of Gaussian KL divergences, one noise row per timestep.
pub fn vlb_direct(
    theta: &EpsPredictor,
    s: &NoiseSchedule,
    x0: ArrayView1<'_, f64>,
    eps_per_t: ArrayView2<'_, f64>,
) -> Result<VlbTerms> {
    let steps = s.steps();
    let dim = x0.len();
    if eps_per_t.dim() != (steps, dim) {
        return Err(Error::ShapeMismatch(format!(
            "noise table {:?}, expected ({steps}, {dim})",
            eps_per_t.dim()
        )));
    }
    let ts: Vec<usize> = (1..=steps).collect();
    let x0_rows = DataBatch::new(x0.broadcast((steps, dim)).unwrap().to_owned())?;
    let noised = forward_noise(s, &x0_rows, &ts, eps_per_t)?;
    let eps_hat = theta.predict_eps(noised.xt.view(), &ts)?;

    let mut mean_terms = Vec::with_capacity(steps);
    let mut variance_terms = Vec::with_capacity(steps);
    for (i, &t) in ts.iter().enumerate() {
        let xt = noised.xt.row(i);
        let (mu_q, var_q) = posterior_params(s, x0, xt, t)?;
        let mu_p = reverse_mean(s, xt, eps_hat.row(i), t);
        let var_p = s.sigma2(t);
        let sq: f64 = mu_q
            .iter()
            .zip(mu_p.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        mean_terms.push(sq / (2.0 * var_p));
        variance_terms.push(if t == 1 {
            0.0
        } else {
            let r = var_q / var_p;
            0.5 * dim as f64 * (r - 1.0 - r.ln())
        });
    }
    Ok(VlbTerms {
        mean_terms,
        variance_terms,
    })
}

/// Knobs for [`ancestral_sample`].
#[derive(Debug, Clone, Copy, Default)]
pub struct SamplingOptions {
    /// Drop the σ_t·z term at every step (debugging aid).
    pub zero_noise: bool,
}

/// Runs the learned reverse chain from x_T ~ N(0, I) down to x_0.
pub fn ancestral_sample<R: Rng + ?Sized>(
    theta: &EpsPredictor,
    s: &NoiseSchedule,
    n: usize,
    rng: &mut R,
    opts: SamplingOptions,
) -> Result<Array2<f64>> {
    let dim = theta.dim();
    let mut x: Array2<f64> = Array2::from_shape_fn((n, dim), |_| StandardNormal.sample(rng));
    if n == 0 {
        return Ok(x);
    }
    sample_from(theta, s, &mut x, rng, opts)?;
    Ok(x)
}

/// Reverse chain starting from a caller-supplied x_T (overwritten with x_0).
pub fn sample_from<R: Rng + ?Sized>(
    theta: &EpsPredictor,
    s: &NoiseSchedule,
    x: &mut Array2<f64>,
    rng: &mut R,
    opts: SamplingOptions,
) -> Result<()> {
    let n = x.nrows();
    for t in (1..=s.steps()).rev() {
        let ts = vec![t; n];
        let eps_hat = theta.predict_eps(x.view(), &ts)?;
        let sigma = s.sigma2(t).sqrt();
        for i in 0..n {
            let mu = reverse_mean(s, x.row(i), eps_hat.row(i), t);
            let mut row = x.row_mut(i);
            for j in 0..row.len() {
                let z: f64 = if t > 1 && !opts.zero_noise {
                    StandardNormal.sample(rng)
                } else {
                    0.0
                };
                row[j] = mu[j] + sigma * z;
            }
        }
    }
    Ok(())
}
