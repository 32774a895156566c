//! Diagnostics around timestep imbalance: per-timestep gradient variance,
//! restricted-range interdependence runs, the variance-proportional sampler,
//! and the analytic cost model of the adaptive sampler.

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::baselines::{weights_to_probs, TableMode, WeightTable};
use crate::diffusion::{per_timestep_loss, DataBatch};
use crate::error::{Error, Result};
use crate::predictor::{adam_step, clip_grad_norm, AdamState, EpsPredictor};
use crate::rng::substream;
use crate::schedules::NoiseSchedule;

/// Trace-of-covariance estimate Σ_i ‖g_i − ḡ‖² / (n − 1).
pub fn grad_variance(grads: &[Vec<f64>]) -> Result<f64> {
    let n = grads.len();
    if n < 2 {
        return Err(Error::Domain(format!(
            "variance needs at least 2 gradients, got {n}"
        )));
    }
    let p = grads[0].len();
    let mut mean = vec![0.0; p];
    for g in grads {
        if g.len() != p {
            return Err(Error::ShapeMismatch(
                "gradients of different lengths".into(),
            ));
        }
        for (m, v) in mean.iter_mut().zip(g) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let ss: f64 = grads
        .iter()
        .map(|g| {
            g.iter()
                .zip(&mean)
                .map(|(v, m)| (v - m) * (v - m))
                .sum::<f64>()
        })
        .sum();
    Ok(ss / (n - 1) as f64)
}

/// Draws n (x_0, ε) pairs: rows of `dataset` chosen uniformly with
/// replacement, fresh standard-normal noise.
fn draw_pairs<R: Rng + ?Sized>(
    dataset: &DataBatch,
    n: usize,
    rng: &mut R,
) -> (DataBatch, Array2<f64>) {
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..dataset.len())).collect();
    let eps = Array2::from_shape_fn((n, dataset.dim()), |_| StandardNormal.sample(rng));
    (dataset.select(&idx), eps)
}

/// Gradient variance and mean loss at one timestep on given pairs.
pub fn grad_stats_on(
    theta: &EpsPredictor,
    s: &NoiseSchedule,
    x0: &DataBatch,
    eps: &Array2<f64>,
    t: usize,
    weighted: bool,
) -> Result<(f64, f64)> {
    s.check_timestep(t)?;
    let n = x0.len();
    let weights = weighted.then(|| vec![s.c(t); n]);
    let grads = theta.per_sample_grads(s, x0, eps.view(), &vec![t; n], weights.as_deref())?;
    let var = grad_variance(&grads)?;
    let loss = per_timestep_loss(theta, s, x0, eps.view(), t, weighted)?;
    Ok((var, loss))
}

/// Variance of per-sample gradients of the ε-MSE at timestep t over n pairs.
pub fn grad_variance_at<R: Rng + ?Sized>(
    theta: &EpsPredictor,
    s: &NoiseSchedule,
    dataset: &DataBatch,
    t: usize,
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    if n < 2 {
        return Err(Error::Domain(format!("n must be at least 2, got {n}")));
    }
    let (x0, eps) = draw_pairs(dataset, n, rng);
    Ok(grad_stats_on(theta, s, &x0, &eps, t, false)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceProfile {
    pub epoch: u64,
    pub weighted: bool,
    pub t_grid: Vec<usize>,
    pub grad_var: Vec<f64>,
    pub loss: Vec<f64>,
}

impl VarianceProfile {
    /// Mean gradient variance over grid points with lo ≤ t ≤ hi.
    pub fn mean_var_in(&self, lo: usize, hi: usize) -> Option<f64> {
        let vals: Vec<f64> = self
            .t_grid
            .iter()
            .zip(&self.grad_var)
            .filter(|(t, _)| (lo..=hi).contains(*t))
            .map(|(_, v)| *v)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// `points` timesteps evenly spaced over 1..=T (rounded, deduplicated).
pub fn even_grid(steps: usize, points: usize) -> Vec<usize> {
    if points <= 1 {
        return vec![1];
    }
    let mut g: Vec<usize> = (0..points)
        .map(|i| (1.0 + i as f64 * (steps - 1) as f64 / (points - 1) as f64).round() as usize)
        .collect();
    g.dedup();
    g
}

/// Gradient variance and mean loss at every grid timestep.
#[allow(clippy::too_many_arguments)]
pub fn variance_profile<R: Rng + ?Sized>(
    theta: &EpsPredictor,
    s: &NoiseSchedule,
    dataset: &DataBatch,
    t_grid: &[usize],
    n: usize,
    weighted: bool,
    epoch: u64,
    rng: &mut R,
) -> Result<VarianceProfile> {
    if t_grid.is_empty() {
        return Err(Error::Config("empty timestep grid".into()));
    }
    if n < 2 {
        return Err(Error::Domain(format!("n must be at least 2, got {n}")));
    }
    let mut grad_var = Vec::with_capacity(t_grid.len());
    let mut loss = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let (x0, eps) = draw_pairs(dataset, n, rng);
        let (v, l) = grad_stats_on(theta, s, &x0, &eps, t, weighted)?;
        grad_var.push(v);
        loss.push(l);
    }
    Ok(VarianceProfile {
        epoch,
        weighted,
        t_grid: t_grid.to_vec(),
        grad_var,
        loss,
    })
}

/// Appends profile rows `(epoch, t, grad_var, loss, weighted_flag)`,
/// writing the header when the file is new.
pub fn write_variance_csv(path: &Path, profile: &VarianceProfile) -> Result<()> {
    let fresh = !path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(["epoch", "t", "grad_var", "loss", "weighted_flag"])?;
    }
    for ((t, v), l) in profile
        .t_grid
        .iter()
        .zip(&profile.grad_var)
        .zip(&profile.loss)
    {
        w.write_record([
            profile.epoch.to_string(),
            t.to_string(),
            v.to_string(),
            l.to_string(),
            (profile.weighted as u8).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Piecewise-constant extension of the grid variances to every timestep,
/// normalised into a sampling distribution. Timestep t takes the value of
/// the last grid point ≤ t (the first grid point for t below the grid).
pub fn variance_proportional_sampler(
    profile: &VarianceProfile,
    steps: usize,
) -> Result<WeightTable> {
    if profile.t_grid.is_empty() || profile.t_grid.len() != profile.grad_var.len() {
        return Err(Error::ShapeMismatch(
            "profile grid and values disagree".into(),
        ));
    }
    let mut pts: Vec<(usize, f64)> = profile
        .t_grid
        .iter()
        .copied()
        .zip(profile.grad_var.iter().copied())
        .collect();
    pts.sort_by_key(|p| p.0);
    let mut w = Vec::with_capacity(steps);
    let mut j = 0;
    for t in 1..=steps {
        while j + 1 < pts.len() && pts[j + 1].0 <= t {
            j += 1;
        }
        w.push(pts[j].1.max(0.0));
    }
    if w.iter().sum::<f64>() <= 0.0 {
        return Err(Error::ZeroWeights);
    }
    weights_to_probs(&WeightTable::new(w, TableMode::LossWeight)?)
}

/// Frozen evaluation set for per-timestep losses: probe samples plus one
/// noise block per timestep, reproducible from a seed.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub x0: DataBatch,
    seed: u64,
}

impl ProbeSet {
    pub fn new(x0: DataBatch, seed: u64) -> Self {
        Self { x0, seed }
    }

    pub fn noise(&self, t: usize) -> Array2<f64> {
        let mut rng = substream(self.seed, t as u64);
        Array2::from_shape_fn((self.x0.len(), self.x0.dim()), |_| {
            StandardNormal.sample(&mut rng)
        })
    }

    /// Mean unweighted loss at every timestep 1..=T.
    pub fn losses(&self, theta: &EpsPredictor, s: &NoiseSchedule) -> Result<Vec<f64>> {
        (1..=s.steps())
            .map(|t| per_timestep_loss(theta, s, &self.x0, self.noise(t).view(), t, false))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterdependenceConfig {
    /// Training timesteps are drawn uniformly from lo..hi (hi exclusive).
    pub range: (usize, usize),
    pub steps: u64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub probes: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterdependenceResult {
    pub loss_before: Vec<f64>,
    pub loss_after: Vec<f64>,
}

impl InterdependenceResult {
    /// after − before for each timestep.
    pub fn delta(&self) -> Vec<f64> {
        self.loss_after
            .iter()
            .zip(&self.loss_before)
            .map(|(a, b)| a - b)
            .collect()
    }

    /// Mean of after − before over lo ≤ t ≤ hi.
    pub fn mean_delta_in(&self, lo: usize, hi: usize) -> f64 {
        let d = self.delta();
        let vals = &d[lo - 1..hi];
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "loss_before", "loss_after", "delta"])?;
        for (i, (b, a)) in self.loss_before.iter().zip(&self.loss_after).enumerate() {
            w.write_record([
                (i + 1).to_string(),
                b.to_string(),
                a.to_string(),
                (a - b).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Continues training `theta` with t restricted to `cfg.range` and reports
/// the per-timestep loss before and after on a frozen probe set.
pub fn interdependence_experiment(
    theta: &EpsPredictor,
    adam: &AdamState,
    s: &NoiseSchedule,
    dataset: &DataBatch,
    cfg: &InterdependenceConfig,
) -> Result<InterdependenceResult> {
    let (lo, hi) = cfg.range;
    if !(lo >= 1 && lo < hi && hi <= s.steps() + 1) {
        return Err(Error::Config(format!(
            "range {lo}:{hi} is not a non-empty part of 1..={}",
            s.steps()
        )));
    }
    if cfg.batch_size == 0 || cfg.probes == 0 {
        return Err(Error::Config(
            "batch_size and probes must be positive".into(),
        ));
    }
    let mut rng = crate::rng::stream(cfg.seed, crate::rng::Stream::Profile);
    let probe_idx: Vec<usize> = (0..cfg.probes)
        .map(|_| rng.random_range(0..dataset.len()))
        .collect();
    let probes = ProbeSet::new(dataset.select(&probe_idx), rng.random());
    let loss_before = probes.losses(theta, s)?;

    let mut model = theta.clone();
    let mut opt = adam.clone();
    for _ in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..dataset.len()))
            .collect();
        let batch = dataset.select(&idx);
        let eps = Array2::from_shape_fn((cfg.batch_size, dataset.dim()), |_| {
            StandardNormal.sample(&mut rng)
        });
        let ts: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(lo..hi))
            .collect();
        let (_, mut grad) = model.loss_and_grad(s, &batch, eps.view(), &ts, None)?;
        clip_grad_norm(&mut grad, cfg.grad_clip);
        adam_step(model.params_mut(), &grad, &mut opt);
    }
    let loss_after = if cfg.steps == 0 {
        loss_before.clone()
    } else {
        probes.losses(&model, s)?
    };
    Ok(InterdependenceResult {
        loss_before,
        loss_after,
    })
}

/// Symbolic cost of the adaptive sampler in units of one batch forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub subset_size: usize,
    pub batch: usize,
    pub steps: usize,
    pub f_s: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    /// 2|S| + 2T/|B|.
    pub delta_cost: f64,
    /// (4 + 1 + (delta_cost + 4)/f_s) / 4, relative to a plain iteration.
    pub overhead_ratio: f64,
}

pub fn cost_model_eval(m: &CostModel) -> Result<CostEstimate> {
    if m.subset_size == 0 || m.batch == 0 || m.steps == 0 || m.f_s == 0 {
        return Err(Error::Config(format!(
            "cost model fields must be positive: {m:?}"
        )));
    }
    let delta_cost = 2.0 * m.subset_size as f64 + 2.0 * m.steps as f64 / m.batch as f64;
    let overhead_ratio = (4.0 + 1.0 + (delta_cost + 4.0) / m.f_s as f64) / 4.0;
    Ok(CostEstimate {
        delta_cost,
        overhead_ratio,
    })
}

/// Accumulates wall-clock time per named phase.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct PhaseTimer {
    phases: Vec<(String, f64)>,
}

impl PhaseTimer {
    pub fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.add(phase, start.elapsed());
        out
    }

    pub fn add(&mut self, phase: &str, d: Duration) {
        match self.phases.iter_mut().find(|(p, _)| p == phase) {
            Some((_, secs)) => *secs += d.as_secs_f64(),
            None => self.phases.push((phase.to_string(), d.as_secs_f64())),
        }
    }

    pub fn seconds(&self, phase: &str) -> f64 {
        self.phases
            .iter()
            .find(|(p, _)| p == phase)
            .map_or(0.0, |(_, s)| *s)
    }

    pub fn total(&self) -> f64 {
        self.phases.iter().map(|(_, s)| s).sum()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let map: serde_json::Map<String, serde_json::Value> = self
            .phases
            .iter()
            .map(|(p, s)| (p.clone(), serde_json::json!(s)))
            .collect();
        let mut f = std::fs::File::create(path)?;
        f.write_all(serde_json::to_string_pretty(&map)?.as_bytes())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::Activation;
    use crate::predictor::PredictorSpec;
    use crate::rng::{stream, Stream};
    use crate::schedules::{build_schedule, ScheduleKind};
    use approx::assert_relative_eq;
    use ndarray::Axis;

    fn tiny_spec() -> PredictorSpec {
        PredictorSpec {
            hidden_dims: vec![12, 12],
            time_embed_dim: 8,
            activation: Activation::Silu,
        }
    }

    fn data(n: usize, seed: u64) -> DataBatch {
        let mut rng = stream(seed, Stream::Data);
        DataBatch::new(Array2::from_shape_fn((n, 2), |_| {
            StandardNormal.sample(&mut rng)
        }))
        .unwrap()
    }

    #[test]
    fn crafted_two_sample_variance() {
        assert_eq!(
            grad_variance(&[vec![1.0, 0.0], vec![3.0, 0.0]]).unwrap(),
            2.0
        );
        assert!(grad_variance(&[vec![1.0]]).is_err());
    }

    #[test]
    fn identical_pairs_have_zero_variance() {
        let s = build_schedule(ScheduleKind::Linear, 50, 1e-4, 0.02).unwrap();
        let p = EpsPredictor::new(2, 50, &tiny_spec(), &mut stream(1, Stream::Init)).unwrap();
        let x0 = DataBatch::new(Array2::from_elem((5, 2), 0.7)).unwrap();
        let eps = Array2::from_elem((5, 2), -0.2);
        let (v, _) = grad_stats_on(&p, &s, &x0, &eps, 20, false).unwrap();
        // only the rounding of the mean survives
        assert!(v < 1e-24, "{v}");
    }

    #[test]
    fn variance_is_order_invariant() {
        let s = build_schedule(ScheduleKind::Linear, 50, 1e-4, 0.02).unwrap();
        let p = EpsPredictor::new(2, 50, &tiny_spec(), &mut stream(2, Stream::Init)).unwrap();
        let x0 = data(9, 3);
        let eps = data(9, 4).into_inner();
        let (v1, _) = grad_stats_on(&p, &s, &x0, &eps, 10, false).unwrap();
        let perm = [4, 8, 0, 3, 1, 7, 2, 6, 5];
        let (v2, _) = grad_stats_on(
            &p,
            &s,
            &x0.select(&perm),
            &eps.select(Axis(0), &perm),
            10,
            false,
        )
        .unwrap();
        assert_relative_eq!(v1, v2, max_relative = 1e-10);
    }

    #[test]
    fn estimator_is_unbiased_on_linear_model() {
        // g_i = A z_i with z_i ~ N(0, I): E[estimate] = tr(A Aᵀ)
        let a = [[1.0, 0.5, 0.0], [0.0, 2.0, -1.0]];
        let trace: f64 = a.iter().flatten().map(|v| v * v).sum();
        let mut rng = stream(5, Stream::Profile);
        let reps = 200;
        let mut estimates = Vec::with_capacity(reps);
        for _ in 0..reps {
            let grads: Vec<Vec<f64>> = (0..10)
                .map(|_| {
                    let z: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
                    a.iter()
                        .map(|row| row.iter().zip(&z).map(|(x, y)| x * y).sum())
                        .collect()
                })
                .collect();
            estimates.push(grad_variance(&grads).unwrap());
        }
        let mean = estimates.iter().sum::<f64>() / reps as f64;
        let sd =
            (estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        assert!(
            (mean - trace).abs() < 4.0 * sd / (reps as f64).sqrt(),
            "{mean} vs {trace}"
        );
    }

    #[test]
    fn singleton_profile_and_csv() {
        let s = build_schedule(ScheduleKind::Linear, 50, 1e-4, 0.02).unwrap();
        let p = EpsPredictor::new(2, 50, &tiny_spec(), &mut stream(6, Stream::Init)).unwrap();
        let prof = variance_profile(
            &p,
            &s,
            &data(100, 7),
            &[25],
            8,
            false,
            3,
            &mut stream(1, Stream::Profile),
        )
        .unwrap();
        assert_eq!(prof.t_grid, vec![25]);
        assert!(prof.grad_var[0] >= 0.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("variance_profile.csv");
        write_variance_csv(&path, &prof).unwrap();
        write_variance_csv(&path, &prof).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,t,grad_var,loss,weighted_flag");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("3,25,"));
    }

    #[test]
    fn even_grid_covers_range() {
        let g = even_grid(1000, 50);
        assert_eq!(g.len(), 50);
        assert_eq!((g[0], g[49]), (1, 1000));
        assert_eq!(even_grid(1000, 1), vec![1]);
    }

    #[test]
    fn proportional_sampler_tables() {
        let flat = VarianceProfile {
            epoch: 0,
            weighted: false,
            t_grid: vec![1, 5, 9],
            grad_var: vec![2.0; 3],
            loss: vec![0.0; 3],
        };
        let p = variance_proportional_sampler(&flat, 12).unwrap();
        assert!(p.weights().iter().all(|v| (v - 1.0 / 12.0).abs() < 1e-15));

        let hot = VarianceProfile {
            epoch: 0,
            weighted: false,
            t_grid: vec![1, 5, 9],
            grad_var: vec![0.0, 3.0, 0.0],
            loss: vec![0.0; 3],
        };
        let p = variance_proportional_sampler(&hot, 12).unwrap();
        for t in 1..=12 {
            let expect = if (5..9).contains(&t) { 0.25 } else { 0.0 };
            assert_eq!(p.at(t), expect);
        }

        let rough = VarianceProfile {
            epoch: 0,
            weighted: false,
            t_grid: even_grid(1000, 50),
            grad_var: (0..50).map(|i| 1.0 / (1.0 + i as f64)).collect(),
            loss: vec![0.0; 50],
        };
        let p = variance_proportional_sampler(&rough, 1000).unwrap();
        assert!((p.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-12);

        let zero = VarianceProfile {
            epoch: 0,
            weighted: false,
            t_grid: vec![1],
            grad_var: vec![0.0],
            loss: vec![0.0],
        };
        assert!(variance_proportional_sampler(&zero, 5).is_err());
    }

    #[test]
    fn zero_step_interdependence_is_flat() {
        let s = build_schedule(ScheduleKind::Linear, 30, 1e-4, 0.02).unwrap();
        let p = EpsPredictor::new(2, 30, &tiny_spec(), &mut stream(8, Stream::Init)).unwrap();
        let cfg = InterdependenceConfig {
            range: (1, 6),
            steps: 0,
            batch_size: 8,
            grad_clip: 1.0,
            probes: 4,
            seed: 1,
        };
        let r = interdependence_experiment(
            &p,
            &AdamState::new(p.num_params(), 2e-4),
            &s,
            &data(50, 9),
            &cfg,
        )
        .unwrap();
        assert!(r.delta().iter().all(|d| *d == 0.0));

        let cfg = InterdependenceConfig { steps: 5, ..cfg };
        let a = interdependence_experiment(
            &p,
            &AdamState::new(p.num_params(), 2e-4),
            &s,
            &data(50, 9),
            &cfg,
        )
        .unwrap();
        let b = interdependence_experiment(
            &p,
            &AdamState::new(p.num_params(), 2e-4),
            &s,
            &data(50, 9),
            &cfg,
        )
        .unwrap();
        assert_eq!(a, b);
        let bad = InterdependenceConfig {
            range: (5, 5),
            ..cfg
        };
        assert!(interdependence_experiment(
            &p,
            &AdamState::new(p.num_params(), 2e-4),
            &s,
            &data(50, 9),
            &bad
        )
        .is_err());
    }

    #[test]
    fn cost_model_constants() {
        let e = cost_model_eval(&CostModel {
            subset_size: 3,
            batch: 128,
            steps: 1000,
            f_s: 40,
        })
        .unwrap();
        assert_eq!(e.delta_cost, 21.625);
        assert_eq!(e.overhead_ratio, 1.41015625);
        assert_eq!((e.overhead_ratio * 1e4).round() / 1e4, 1.4102);
        let far = cost_model_eval(&CostModel {
            subset_size: 3,
            batch: 128,
            steps: 1000,
            f_s: 1_000_000_000,
        })
        .unwrap();
        assert!((far.overhead_ratio - 1.25).abs() < 1e-8);
        assert!(cost_model_eval(&CostModel {
            subset_size: 0,
            batch: 128,
            steps: 1000,
            f_s: 40
        })
        .is_err());
    }
}
