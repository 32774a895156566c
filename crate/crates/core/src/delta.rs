//! Objective-drop estimates around one model update.
//!
//! δ_τ is the drop of the timestep-τ loss between two parameter snapshots,
//! Δ the mean of δ_τ over all T timesteps. A full sweep on one probe sample
//! costs 2T single-sample forwards; its δ vector is pushed into a FIFO queue,
//! the F-statistic ranks timesteps by how well δ_τ explains Δ across the
//! queue, and Δ̃ is the mean δ over the selected few timesteps on the current
//! mini-batch.
//!
//! All loss evaluations in this module go through [`batch_deltas`]: rows are
//! stacked τ-major, the noise for timestep τ comes from sub-stream τ of a
//! per-event seed, and the same rows are pushed through both snapshots. The
//! full sweep is exactly `batch_deltas` on a one-row batch with every τ, so a
//! subset estimate over all timesteps on the probe reproduces it bit for bit.

use std::collections::VecDeque;

use ndarray::{s, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_noise, row_losses, DataBatch};
use crate::error::{Error, Result};
use crate::predictor::EpsPredictor;
use crate::rng::substream;
use crate::schedules::NoiseSchedule;

/// Value returned by [`f_statistic`] for a perfect linear fit.
pub const F_SENTINEL: f64 = f64::MAX;

/// Rows per predictor call when evaluating stacked losses.
const CHUNK_ROWS: usize = 8192;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSweep {
    deltas: Vec<f64>,
    target: f64,
    pub k: u64,
    pub x0_id: usize,
}

impl DeltaSweep {
    pub fn new(deltas: Vec<f64>, k: u64, x0_id: usize) -> Result<Self> {
        if deltas.is_empty() {
            return Err(Error::ShapeMismatch(
                "a sweep needs at least one timestep".into(),
            ));
        }
        if let Some(v) = deltas.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "sweep delta {v} at iteration {k}"
            )));
        }
        let target = deltas.iter().sum::<f64>() / deltas.len() as f64;
        Ok(Self {
            deltas,
            target,
            k,
            x0_id,
        })
    }

    /// δ_τ for τ = 1..=T (index τ − 1).
    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    /// Δ = mean of the deltas.
    pub fn target(&self) -> f64 {
        self.target
    }
}

/// Fixed-capacity FIFO of sweeps; the oldest is evicted first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaQueue {
    capacity: usize,
    entries: VecDeque<DeltaSweep>,
}

impl DeltaQueue {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("queue capacity must be at least 1".into()));
        }
        Ok(Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &DeltaSweep> {
        self.entries.iter()
    }
}

pub fn push_sweep(q: &mut DeltaQueue, sweep: DeltaSweep) {
    if q.entries.len() == q.capacity {
        q.entries.pop_front();
    }
    q.entries.push_back(sweep);
}

/// Univariate regression F-score F = r²(n − 2)/(1 − r²).
///
/// Returns 0 when n < 3 or either series has no variance, and
/// [`F_SENTINEL`] when the fit is perfect.
pub fn f_statistic(feature: &[f64], target: &[f64]) -> f64 {
    let n = feature.len();
    if n != target.len() || n < 3 {
        return 0.0;
    }
    let mx = feature.iter().sum::<f64>() / n as f64;
    let my = target.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in feature.iter().zip(target) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if !(sxx > 0.0 && syy > 0.0) || !(sxx.is_finite() && syy.is_finite()) {
        return 0.0;
    }
    let r2 = (sxy * sxy / (sxx * syy)).min(1.0);
    if r2 >= 1.0 {
        return F_SENTINEL;
    }
    r2 * (n - 2) as f64 / (1.0 - r2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedSubset {
    /// Selected timesteps in ascending order.
    pub timesteps: Vec<usize>,
    /// F-score of every timestep (index τ − 1); empty for fallback subsets.
    pub f_scores: Vec<f64>,
    pub fallback: bool,
}

impl SelectedSubset {
    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    /// {T/4, T/2, 3T/4}, used before the queue can support selection.
    pub fn quartiles(steps: usize) -> Self {
        let mut ts: Vec<usize> = [steps / 4, steps / 2, 3 * steps / 4]
            .iter()
            .map(|&t| t.clamp(1, steps))
            .collect();
        ts.dedup();
        Self {
            timesteps: ts,
            f_scores: Vec::new(),
            fallback: true,
        }
    }

    pub fn all(steps: usize) -> Self {
        Self {
            timesteps: (1..=steps).collect(),
            f_scores: Vec::new(),
            fallback: false,
        }
    }
}

/// Top-`size` timesteps by F-score of δ_τ against Δ across the queue.
///
/// Ties go to the smaller τ. Entries are read in (k, x0_id) order, so the
/// result does not depend on the order sweeps were pushed in.
pub fn select_timesteps(q: &DeltaQueue, size: usize) -> Result<SelectedSubset> {
    if q.len() < 2 {
        return Err(Error::QueueTooSmall { len: q.len() });
    }
    let mut entries: Vec<&DeltaSweep> = q.entries.iter().collect();
    entries.sort_by(|a, b| (a.k, a.x0_id).cmp(&(b.k, b.x0_id)));
    let steps = entries[0].deltas.len();
    if entries.iter().any(|e| e.deltas.len() != steps) {
        return Err(Error::ShapeMismatch(
            "queue holds sweeps of different lengths".into(),
        ));
    }
    if size == 0 || size > steps {
        return Err(Error::Config(format!(
            "subset size {size} outside 1..={steps}"
        )));
    }
    let target: Vec<f64> = entries.iter().map(|e| e.target).collect();
    let mut feature = vec![0.0; entries.len()];
    let f_scores: Vec<f64> = (0..steps)
        .map(|i| {
            for (slot, e) in feature.iter_mut().zip(&entries) {
                *slot = e.deltas[i];
            }
            f_statistic(&feature, &target)
        })
        .collect();
    let mut order: Vec<usize> = (0..steps).collect();
    order.sort_by(|&i, &j| f_scores[j].total_cmp(&f_scores[i]).then(i.cmp(&j)));
    let mut timesteps: Vec<usize> = order[..size].iter().map(|i| i + 1).collect();
    timesteps.sort_unstable();
    Ok(SelectedSubset {
        timesteps,
        f_scores,
        fallback: false,
    })
}

/// Standard-normal noise block for timestep τ of a measurement event.
pub fn tau_noise(event_seed: u64, tau: usize, rows: usize, dim: usize) -> Array2<f64> {
    let mut rng = substream(event_seed, tau as u64);
    Array2::from_shape_fn((rows, dim), |_| StandardNormal.sample(&mut rng))
}

/// Per-row losses of `theta` on stacked rows, evaluated in fixed-size chunks.
fn stacked_row_losses(
    theta: &EpsPredictor,
    s: &NoiseSchedule,
    x0: &DataBatch,
    eps: &Array2<f64>,
    ts: &[usize],
) -> Result<Vec<f64>> {
    let noised = forward_noise(s, x0, ts, eps.view())?;
    let mut out = Vec::with_capacity(ts.len());
    let mut start = 0;
    while start < ts.len() {
        let end = (start + CHUNK_ROWS).min(ts.len());
        let eps_hat = theta.predict_eps(noised.xt.slice(s![start..end, ..]), &ts[start..end])?;
        out.extend(row_losses(eps_hat.view(), eps.slice(s![start..end, ..])));
        start = end;
    }
    Ok(out)
}

/// δ_τ for each τ in `taus`: the batch mean of L_τ(before) − L_τ(after)
/// with paired noise, c_τ-weighted when `weighted`.
///
/// Costs exactly 2·|taus|·|batch| single-sample forwards.
pub fn batch_deltas(
    before: &EpsPredictor,
    after: &EpsPredictor,
    s: &NoiseSchedule,
    batch: &DataBatch,
    taus: &[usize],
    event_seed: u64,
    weighted: bool,
) -> Result<Vec<f64>> {
    let (b, dim) = (batch.len(), batch.dim());
    let rows = taus.len() * b;
    let mut x0 = Array2::zeros((rows, dim));
    let mut eps = Array2::zeros((rows, dim));
    let mut ts = Vec::with_capacity(rows);
    for (j, &tau) in taus.iter().enumerate() {
        s.check_timestep(tau)?;
        x0.slice_mut(s![j * b..(j + 1) * b, ..]).assign(&batch.x0());
        eps.slice_mut(s![j * b..(j + 1) * b, ..])
            .assign(&tau_noise(event_seed, tau, b, dim));
        ts.extend(std::iter::repeat_n(tau, b));
    }
    let x0 = DataBatch::new(x0)?;
    let l_before = stacked_row_losses(before, s, &x0, &eps, &ts)?;
    let l_after = stacked_row_losses(after, s, &x0, &eps, &ts)?;
    let mut out = Vec::with_capacity(taus.len());
    for (j, &tau) in taus.iter().enumerate() {
        let range = j * b..(j + 1) * b;
        let diff: f64 = range.map(|i| l_before[i] - l_after[i]).sum::<f64>() / b as f64;
        let d = if weighted { s.c(tau) * diff } else { diff };
        if !d.is_finite() {
            return Err(Error::NonFinite(format!("delta at timestep {tau}")));
        }
        out.push(d);
    }
    Ok(out)
}

/// Full sweep on one probe sample with an explicit event seed.
pub fn full_delta_sweep_seeded(
    before: &EpsPredictor,
    after: &EpsPredictor,
    s: &NoiseSchedule,
    x0: &DataBatch,
    event_seed: u64,
    weighted: bool,
) -> Result<Vec<f64>> {
    if x0.len() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "a sweep takes one probe sample, got {}",
            x0.len()
        )));
    }
    let taus: Vec<usize> = (1..=s.steps()).collect();
    batch_deltas(before, after, s, x0, &taus, event_seed, weighted)
}

/// δ_τ for τ = 1..=T on one probe sample, one fresh noise draw per τ shared
/// by both snapshots; c_τ-weighted.
pub fn full_delta_sweep<R: Rng + ?Sized>(
    before: &EpsPredictor,
    after: &EpsPredictor,
    s: &NoiseSchedule,
    x0: &DataBatch,
    k: u64,
    x0_id: usize,
    rng: &mut R,
) -> Result<DeltaSweep> {
    let deltas = full_delta_sweep_seeded(before, after, s, x0, rng.random(), true)?;
    DeltaSweep::new(deltas, k, x0_id)
}

/// Δ̃ = mean over τ ∈ S of the paired batch loss drop, with an explicit seed.
pub fn approx_delta_seeded(
    before: &EpsPredictor,
    after: &EpsPredictor,
    s: &NoiseSchedule,
    batch: &DataBatch,
    subset: &SelectedSubset,
    event_seed: u64,
    weighted: bool,
) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::Config("empty timestep subset".into()));
    }
    let d = batch_deltas(
        before,
        after,
        s,
        batch,
        &subset.timesteps,
        event_seed,
        weighted,
    )?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Δ̃ on the current mini-batch; c_τ-weighted.
pub fn approx_delta<R: Rng + ?Sized>(
    before: &EpsPredictor,
    after: &EpsPredictor,
    s: &NoiseSchedule,
    batch: &DataBatch,
    subset: &SelectedSubset,
    rng: &mut R,
) -> Result<f64> {
    approx_delta_seeded(before, after, s, batch, subset, rng.random(), true)
}

/// True iff k mod f_s = 0.
pub fn cadence_gate(k: u64, f_s: u64) -> bool {
    assert!(f_s >= 1, "f_s must be at least 1");
    k % f_s == 0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::Activation;
    use crate::predictor::{adam_step, AdamState, PredictorSpec};
    use crate::rng::{stream, Stream};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn tiny_spec() -> PredictorSpec {
        PredictorSpec {
            hidden_dims: vec![16, 16],
            time_embed_dim: 8,
            activation: Activation::Silu,
        }
    }

    fn linear(steps: usize) -> NoiseSchedule {
        crate::schedules::build_schedule(crate::schedules::ScheduleKind::Linear, steps, 1e-4, 0.02)
            .unwrap()
    }

    fn normal(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = stream(seed, Stream::Data);
        Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
    }

    fn sweep(deltas: Vec<f64>, k: u64) -> DeltaSweep {
        DeltaSweep::new(deltas, k, k as usize).unwrap()
    }

    /// F of a least-squares line fit: (SSR / 1) / (SSE / (n − 2)).
    fn regression_f(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
        let sxx: f64 = x.iter().map(|v| v * v).sum();
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        let icpt = (sy - slope * sx) / n;
        let ybar = sy / n;
        let mut ssr = 0.0;
        let mut sse = 0.0;
        for (a, b) in x.iter().zip(y) {
            let fit = icpt + slope * a;
            ssr += (fit - ybar).powi(2);
            sse += (b - fit).powi(2);
        }
        ssr / (sse / (n - 2.0))
    }

    #[test]
    fn sweep_target_is_mean() {
        let s = sweep(vec![1.0, 2.0, 6.0], 0);
        assert_eq!(s.target(), 3.0);
        assert!(DeltaSweep::new(vec![f64::NAN], 0, 0).is_err());
    }

    #[test]
    fn queue_is_fifo() {
        let mut q = DeltaQueue::new(20).unwrap();
        push_sweep(&mut q, sweep(vec![0.0], 0));
        assert_eq!(q.len(), 1);
        for k in 1..21 {
            push_sweep(&mut q, sweep(vec![k as f64], k));
        }
        assert_eq!(q.len(), 20);
        let ks: Vec<u64> = q.entries().map(|e| e.k).collect();
        assert_eq!(ks, (1..21).collect::<Vec<_>>());
    }

    #[test]
    fn f_statistic_examples() {
        assert_eq!(
            f_statistic(&[1.0, -1.0, 1.0, -1.0], &[1.0, 1.0, -1.0, -1.0]),
            0.0
        );
        assert_eq!(f_statistic(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), F_SENTINEL);
        let f = f_statistic(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 5.0]);
        let r2: f64 = 42.25 / 43.75;
        assert_relative_eq!(r2.sqrt(), 0.98270, max_relative = 1e-5);
        assert_relative_eq!(f, r2 * 2.0 / (1.0 - r2), max_relative = 1e-12);
        assert_relative_eq!(f, 56.3, max_relative = 1e-3);
        assert_relative_eq!(
            f,
            regression_f(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 5.0]),
            max_relative = 1e-12
        );
        // degenerate inputs
        assert_eq!(f_statistic(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), 0.0);
        assert_eq!(f_statistic(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
    }

    #[test]
    fn perfect_feature_is_selected() {
        let mut q = DeltaQueue::new(20).unwrap();
        let mut rng = stream(1, Stream::Probe);
        for k in 0..10 {
            let mut d: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
            let others: f64 = d
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != 4)
                .map(|(_, v)| v)
                .sum();
            // make δ_5 equal to the mean: 8·d4 = others + d4
            d[4] = others / 7.0;
            push_sweep(&mut q, sweep(d, k));
        }
        let sel = select_timesteps(&q, 3).unwrap();
        assert!(sel.timesteps.contains(&5));
    }

    #[test]
    fn synthetic_regression_selects_driver() {
        let mut rng = stream(2, Stream::Probe);
        let mut q = DeltaQueue::new(20).unwrap();
        for k in 0..20 {
            let mut d: Vec<f64> = (0..10).map(|_| StandardNormal.sample(&mut rng)).collect();
            let noise: f64 = StandardNormal.sample(&mut rng);
            let target = d[2] + 0.01 * noise;
            // adjust the last coordinate so the mean equals the target
            let rest: f64 = d[..9].iter().sum();
            d[9] = 10.0 * target - rest;
            push_sweep(&mut q, sweep(d, k));
        }
        let sel = select_timesteps(&q, 3).unwrap();
        assert!(sel.timesteps.contains(&3), "{:?}", sel.timesteps);
    }

    #[test]
    fn small_queue_is_rejected() {
        let mut q = DeltaQueue::new(5).unwrap();
        push_sweep(&mut q, sweep(vec![1.0; 4], 0));
        assert!(matches!(
            select_timesteps(&q, 2),
            Err(Error::QueueTooSmall { len: 1 })
        ));
        assert_eq!(
            SelectedSubset::quartiles(1000).timesteps,
            vec![250, 500, 750]
        );
        assert_eq!(SelectedSubset::quartiles(2).timesteps, vec![1]);
        assert_eq!(SelectedSubset::quartiles(10).timesteps, vec![2, 5, 7]);
    }

    fn exhaustive_top_k(f: &[f64], k: usize) -> Vec<usize> {
        let n = f.len();
        let mut best: Option<(f64, Vec<usize>)> = None;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != k {
                continue;
            }
            let set: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let total: f64 = set.iter().map(|&i| f[i]).sum();
            let better = match &best {
                None => true,
                Some((bt, bs)) => total > *bt || (total == *bt && set < *bs),
            };
            if better {
                best = Some((total, set));
            }
        }
        best.unwrap().1.into_iter().map(|i| i + 1).collect()
    }

    #[test]
    fn matches_exhaustive_oracle() {
        let mut rng = stream(3, Stream::Probe);
        for trial in 0..50u64 {
            let mut q = DeltaQueue::new(5).unwrap();
            for k in 0..5 {
                let d: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
                push_sweep(&mut q, sweep(d, trial * 10 + k));
            }
            let sel = select_timesteps(&q, 3).unwrap();
            let target: Vec<f64> = q.entries().map(|e| e.target()).collect();
            let f: Vec<f64> = (0..8)
                .map(|i| {
                    regression_f(
                        &q.entries().map(|e| e.deltas()[i]).collect::<Vec<_>>(),
                        &target,
                    )
                })
                .collect();
            for i in 0..8 {
                assert_relative_eq!(sel.f_scores[i], f[i], max_relative = 1e-9);
            }
            assert_eq!(sel.timesteps, exhaustive_top_k(&f, 3));
        }
    }

    #[test]
    fn ties_prefer_small_timesteps() {
        let mut q = DeltaQueue::new(5).unwrap();
        for k in 0..4 {
            // every coordinate identical ⇒ equal F everywhere
            push_sweep(&mut q, sweep(vec![k as f64 * 0.5; 6], k));
        }
        let sel = select_timesteps(&q, 2).unwrap();
        assert_eq!(sel.timesteps, vec![1, 2]);
    }

    proptest! {
        #[test]
        fn selection_is_permutation_stable(seed in 0u64..500, rot in 0usize..7) {
            let mut rng = stream(seed, Stream::Probe);
            let sweeps: Vec<DeltaSweep> = (0..7)
                .map(|k| sweep((0..9).map(|_| StandardNormal.sample(&mut rng)).collect(), k))
                .collect();
            let mut q1 = DeltaQueue::new(7).unwrap();
            let mut q2 = DeltaQueue::new(7).unwrap();
            for s in &sweeps { push_sweep(&mut q1, s.clone()); }
            let mut shuffled = sweeps.clone();
            shuffled.rotate_left(rot);
            shuffled.swap(0, 6);
            for s in shuffled { push_sweep(&mut q2, s); }
            prop_assert_eq!(select_timesteps(&q1, 3).unwrap(), select_timesteps(&q2, 3).unwrap());
        }
    }

    #[test]
    fn identical_snapshots_give_zero() {
        let s = linear(30);
        let p = EpsPredictor::new(2, 30, &tiny_spec(), &mut stream(1, Stream::Init)).unwrap();
        let x0 = DataBatch::new(normal(1, 2, 2)).unwrap();
        let sw =
            full_delta_sweep(&p, &p.clone(), &s, &x0, 0, 0, &mut stream(1, Stream::Probe)).unwrap();
        assert!(sw.deltas().iter().all(|d| *d == 0.0));
        assert_eq!(sw.target(), 0.0);
        let batch = DataBatch::new(normal(8, 2, 3)).unwrap();
        let d = approx_delta(
            &p,
            &p.clone(),
            &s,
            &batch,
            &SelectedSubset::quartiles(30),
            &mut stream(2, Stream::Probe),
        )
        .unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn forward_counts_match_accounting() {
        let s = linear(40);
        let before = EpsPredictor::new(2, 40, &tiny_spec(), &mut stream(1, Stream::Init)).unwrap();
        let mut after = before.clone();
        after.params_mut()[0] += 0.1;
        let x0 = DataBatch::new(normal(1, 2, 2)).unwrap();
        let rows0 = before.counter().rows();
        full_delta_sweep(
            &before,
            &after,
            &s,
            &x0,
            0,
            0,
            &mut stream(1, Stream::Probe),
        )
        .unwrap();
        assert_eq!(before.counter().rows() - rows0, 2 * 40);

        let batch = DataBatch::new(normal(16, 2, 3)).unwrap();
        let rows1 = before.counter().rows();
        let subset = SelectedSubset::quartiles(40);
        approx_delta(
            &before,
            &after,
            &s,
            &batch,
            &subset,
            &mut stream(2, Stream::Probe),
        )
        .unwrap();
        assert_eq!(before.counter().rows() - rows1, 2 * 3 * 16);
    }

    #[test]
    fn subset_of_all_timesteps_reproduces_sweep_exactly() {
        let s = linear(50);
        let before = EpsPredictor::new(2, 50, &tiny_spec(), &mut stream(4, Stream::Init)).unwrap();
        let mut after = before.clone();
        for (i, p) in after.params_mut().iter_mut().enumerate() {
            *p += 1e-3 * ((i % 7) as f64 - 3.0);
        }
        let x0 = DataBatch::new(normal(1, 2, 5)).unwrap();
        let sweep = DeltaSweep::new(
            full_delta_sweep_seeded(&before, &after, &s, &x0, 99, true).unwrap(),
            0,
            0,
        )
        .unwrap();
        let approx =
            approx_delta_seeded(&before, &after, &s, &x0, &SelectedSubset::all(50), 99, true)
                .unwrap();
        assert_eq!(approx, sweep.target());
    }

    #[test]
    fn descent_step_lowers_its_own_timestep_loss() {
        let s = linear(100);
        let t_star = 40;
        let spec = tiny_spec();
        let before = EpsPredictor::new(2, 100, &spec, &mut stream(6, Stream::Init)).unwrap();
        let data = DataBatch::new(normal(64, 2, 7)).unwrap();
        let eps = normal(64, 2, 8);
        let (_, grad) = before
            .loss_and_grad(&s, &data, eps.view(), &[t_star; 64], None)
            .unwrap();
        let mut after = before.clone();
        let mut opt = AdamState::new(after.num_params(), 1e-3);
        adam_step(after.params_mut(), &grad, &mut opt);
        let mut mean = 0.0;
        for probe in 0..100u64 {
            let x = DataBatch::new(
                data.x0()
                    .slice(s![(probe as usize % 64)..(probe as usize % 64) + 1, ..])
                    .to_owned(),
            )
            .unwrap();
            let d = full_delta_sweep_seeded(&before, &after, &s, &x, probe, true).unwrap();
            mean += d[t_star - 1] / 100.0;
        }
        assert!(mean > 0.0, "mean δ at t* = {mean}");
    }

    #[test]
    fn cadence() {
        assert!(cadence_gate(0, 40));
        assert!(!cadence_gate(39, 40));
        assert!(cadence_gate(80, 40));
        assert!(cadence_gate(7, 1));
    }
}
