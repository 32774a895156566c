//! The training driver: Alg. 1 with any of the configured timestep samplers.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::adaptive::{
    beta_entropy, draw_batch, reinforce_step, PolicyOptimizer, PolicyParams, RewardNormalizer,
    TimestepDraw,
};
use crate::baselines::{
    sample_categorical, sample_lognormal_sigmoid, uniform_sample, weights_min_snr, weights_p2,
    weights_to_probs, WeightTable,
};
use crate::delta::{
    approx_delta_seeded, batch_deltas, cadence_gate, full_delta_sweep_seeded, push_sweep,
    select_timesteps, DeltaQueue, DeltaSweep, SelectedSubset,
};
use crate::diffusion::{ancestral_sample, DataBatch, SamplingOptions};
use crate::error::{Error, Result};
use crate::harness::checkpoint::{eval_model, Checkpoint, CHECKPOINT_VERSION};
use crate::harness::config::{
    ExperimentConfig, Fallback, PolicyOptimizerKind, SamplerKind, SamplerRole,
};
use crate::harness::data::make_split;
use crate::harness::metrics::{
    energy_distance, probe_noise_seed, tracked_vlb, EvalRecord, IterRecord, RunMetrics, VlbProbe,
};
use crate::predictor::{adam_step, clip_grad_norm, AdamState, Ema, EpsPredictor};
use crate::profiler::{even_grid, variance_profile, variance_proportional_sampler, PhaseTimer};
use crate::rng::{stream, Stream, StreamRng};
use crate::schedules::NoiseSchedule;

/// Everything a finished run produces.
#[derive(Debug)]
pub struct TrainOutput {
    pub metrics: RunMetrics,
    pub checkpoint: Checkpoint,
    pub timing: PhaseTimer,
    pub counts: ForwardCounts,
}

/// Predictor forward totals, in single-sample rows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ForwardCounts {
    /// Training-loss forwards: K·|B|.
    pub train: u64,
    /// Alg. 2 forwards: events·(2T + 2|S|·|B|).
    pub delta: u64,
    /// Diagnostic all-timestep Δ forwards (only when tracked).
    pub delta_full: u64,
    /// Variance-profile forwards (variance_proportional only).
    pub profile: u64,
    /// Alg. 2 invocations.
    pub events: u64,
}

/// How the timesteps of a mini-batch are produced.
enum Sampler {
    Uniform,
    /// Uniform t, per-sample loss multiplier w_t.
    LossWeight(WeightTable),
    Table(WeightTable),
    LogNormal {
        mu: f64,
        sigma: f64,
    },
    Adaptive(Box<AdaptiveState>),
    /// Uniform until the first profile, then proportional to it.
    VarianceProportional(Option<WeightTable>),
}

struct AdaptiveState {
    phi: PolicyParams,
    queue: DeltaQueue,
    normalizer: RewardNormalizer,
    opt: PolicyOptimizer,
}

fn heuristic_sampler(table: WeightTable, role: SamplerRole) -> Result<Sampler> {
    Ok(match role {
        SamplerRole::LossWeight => Sampler::LossWeight(table),
        SamplerRole::SamplingProb => Sampler::Table(weights_to_probs(&table)?),
    })
}

fn build_sampler(cfg: &ExperimentConfig, s: &NoiseSchedule, dim: usize) -> Result<Sampler> {
    let sp = &cfg.sampler;
    Ok(match sp.kind {
        SamplerKind::Uniform => Sampler::Uniform,
        SamplerKind::MinSnr => heuristic_sampler(weights_min_snr(s, sp.min_snr_gamma)?, sp.role)?,
        SamplerKind::P2 => heuristic_sampler(weights_p2(s, sp.p2_k, sp.p2_gamma)?, sp.role)?,
        SamplerKind::LogNormal => Sampler::LogNormal {
            mu: sp.log_normal_mu,
            sigma: sp.log_normal_sigma,
        },
        SamplerKind::VarianceProportional => Sampler::VarianceProportional(None),
        SamplerKind::Adaptive => {
            let a = &cfg.adaptive;
            let phi =
                PolicyParams::new(dim, &a.policy_spec(), &mut stream(cfg.seed, Stream::Policy))?;
            let lr = a.resolved_lr(cfg.schedule.kind);
            let opt = match a.optimizer {
                PolicyOptimizerKind::Sgd => PolicyOptimizer::Sgd { lr },
                PolicyOptimizerKind::Adam => {
                    PolicyOptimizer::Adam(AdamState::new(phi.net.num_params(), lr))
                }
            };
            Sampler::Adaptive(Box::new(AdaptiveState {
                phi,
                queue: DeltaQueue::new(a.queue_capacity)?,
                normalizer: RewardNormalizer::new(a.reward_window),
                opt,
            }))
        }
    })
}

/// Timesteps, optional loss weights and (adaptive only) the policy draws.
type Draws = (Vec<usize>, Option<Vec<f64>>, Vec<TimestepDraw>);

fn draw_timesteps(
    sampler: &Sampler,
    batch: &DataBatch,
    steps: usize,
    rng: &mut StreamRng,
) -> Result<Draws> {
    let n = batch.len();
    Ok(match sampler {
        Sampler::Uniform | Sampler::VarianceProportional(None) => (
            (0..n).map(|_| uniform_sample(steps, rng)).collect(),
            None,
            Vec::new(),
        ),
        Sampler::LossWeight(w) => {
            let ts: Vec<usize> = (0..n).map(|_| uniform_sample(steps, rng)).collect();
            let weights = ts.iter().map(|&t| w.at(t)).collect();
            (ts, Some(weights), Vec::new())
        }
        Sampler::Table(p) | Sampler::VarianceProportional(Some(p)) => (
            (0..n)
                .map(|_| sample_categorical(p, rng))
                .collect::<Result<_>>()?,
            None,
            Vec::new(),
        ),
        Sampler::LogNormal { mu, sigma } => (
            (0..n)
                .map(|_| sample_lognormal_sigmoid(steps, *mu, *sigma, rng))
                .collect::<Result<_>>()?,
            None,
            Vec::new(),
        ),
        Sampler::Adaptive(st) => {
            let draws = draw_batch(&st.phi, batch.x0(), steps, rng)?;
            (draws.iter().map(|d| d.t).collect(), None, draws)
        }
    })
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    k: u64,
    loss: f64,
    timesteps: &'a [usize],
    grad_norm: f64,
    param_norm: f64,
    non_finite_params: usize,
}

fn dump_diagnostic(out: Option<&Path>, d: &Diagnostic<'_>) {
    if let Some(dir) = out {
        let path = dir.join("diagnostic.json");
        if let Err(e) = serde_json::to_string_pretty(d)
            .map_err(Error::from)
            .and_then(|s| Ok(std::fs::write(&path, s)?))
        {
            log::error!("could not write {}: {e}", path.display());
        }
    }
}

/// Runs one experiment; writes CSVs, `timing.json` and `checkpoint.json`
/// when the config names an output directory.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutput> {
    train_into(cfg, cfg.out_dir.as_ref().map(PathBuf::from).as_deref())
}

/// [`train`] with an explicit output directory (overriding the config's).
pub fn train_into(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<TrainOutput> {
    cfg.validate()?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let s = cfg.schedule.build()?;
    let steps = s.steps();
    let held_size = cfg.eval.probes.max(cfg.eval.gen_samples);
    let (data, held) = make_split(
        &cfg.dataset,
        cfg.dataset.size,
        held_size,
        cfg.dataset_seed(),
    )?;
    let held = held.expect("held-out size is at least one probe");
    let dim = data.dim();

    let mut theta = EpsPredictor::new(
        dim,
        steps,
        &cfg.predictor,
        &mut stream(cfg.seed, Stream::Init),
    )?;
    let mut adam = AdamState::new(theta.num_params(), cfg.optimizer.lr);
    let mut ema = Ema::new(cfg.optimizer.ema_decay, theta.params());
    let mut sampler = build_sampler(cfg, &s, dim)?;

    let mut data_rng = stream(cfg.seed, Stream::Data);
    let mut noise_rng = stream(cfg.seed, Stream::Noise);
    let mut sampler_rng = stream(cfg.seed, Stream::Sampler);
    let mut probe_rng = stream(cfg.seed, Stream::Probe);
    let mut gen_rng = stream(cfg.seed, Stream::Generate);
    let mut profile_rng = stream(cfg.seed, Stream::Profile);

    let probe_rows: Vec<usize> = (0..cfg.eval.probes).collect();
    let vlb_probe = VlbProbe::new(held.select(&probe_rows), steps, probe_noise_seed(cfg.seed));
    let gen_rows: Vec<usize> = (0..cfg.eval.gen_samples).collect();
    let reference = (cfg.eval.gen_samples > 0).then(|| held.select(&gen_rows));

    let mut metrics = RunMetrics::default();
    let mut timer = PhaseTimer::default();
    let mut counts = ForwardCounts::default();
    let mut best_vlb = f64::INFINITY;
    let batch_size = cfg.batch_size;
    let ad = &cfg.adaptive;
    let iterations = cfg.iterations;

    let mut evaluate = |k: u64,
                        theta: &EpsPredictor,
                        ema: &Ema,
                        gen_rng: &mut StreamRng,
                        timer: &mut PhaseTimer|
     -> Result<EvalRecord> {
        timer.time("eval", || {
            let model = eval_model(theta, ema, cfg.eval.use_ema)?;
            let vlb = tracked_vlb(&model, &s, &vlb_probe)?;
            best_vlb = best_vlb.min(vlb);
            let due =
                k == iterations || (cfg.eval.energy_every > 0 && k % cfg.eval.energy_every == 0);
            let energy = match (&reference, due) {
                (Some(r), true) => {
                    let gen =
                        ancestral_sample(&model, &s, r.len(), gen_rng, SamplingOptions::default())?;
                    Some(energy_distance(gen.view(), r.x0())?)
                }
                _ => None,
            };
            log::info!("k={k} tracked_vlb={vlb:.6} energy={energy:?}");
            Ok(EvalRecord {
                k,
                tracked_vlb: vlb,
                best_vlb,
                energy_distance: energy,
            })
        })
    };

    metrics
        .evals
        .push(evaluate(0, &theta, &ema, &mut gen_rng, &mut timer)?);

    for k in 0..iterations {
        if let Sampler::VarianceProportional(table) = &mut sampler {
            let sp = &cfg.sampler;
            let due = k == sp.profile_after
                || (sp.profile_every > 0
                    && k > sp.profile_after
                    && (k - sp.profile_after) % sp.profile_every == 0);
            if due {
                let before = theta.counter().rows();
                let grid = even_grid(steps, sp.profile_grid);
                let epoch = k * batch_size as u64 / data.len() as u64;
                let profile = timer.time("profile", || {
                    variance_profile(
                        &theta,
                        &s,
                        &data,
                        &grid,
                        sp.profile_n,
                        false,
                        epoch,
                        &mut profile_rng,
                    )
                })?;
                *table = Some(variance_proportional_sampler(&profile, steps)?);
                counts.profile += theta.counter().rows() - before;
            }
        }

        let idx: Vec<usize> = (0..batch_size)
            .map(|_| data_rng.random_range(0..data.len()))
            .collect();
        let batch = data.select(&idx);
        let eps =
            Array2::from_shape_fn((batch_size, dim), |_| StandardNormal.sample(&mut noise_rng));
        let (ts, weights, draws) = timer.time("sampler", || {
            draw_timesteps(&sampler, &batch, steps, &mut sampler_rng)
        })?;

        let event = matches!(sampler, Sampler::Adaptive(_)) && cadence_gate(k, ad.f_s);
        let before = event.then(|| theta.clone());

        let rows_before = theta.counter().rows();
        let (loss, mut grad) = match timer.time("step", || {
            theta.loss_and_grad(&s, &batch, eps.view(), &ts, weights.as_deref())
        }) {
            Ok(lg) => lg,
            // the loss itself overflowed; fall through to the dump with an empty gradient
            Err(Error::NonFinite(_)) => (f64::NAN, Vec::new()),
            Err(e) => return Err(e),
        };
        counts.train += theta.counter().rows() - rows_before;
        let grad_norm = if grad.is_empty() {
            f64::NAN
        } else {
            grad.iter().map(|g| g * g).sum::<f64>().sqrt()
        };
        if !loss.is_finite() || !grad_norm.is_finite() {
            let params = theta.params();
            dump_diagnostic(
                out,
                &Diagnostic {
                    k,
                    loss,
                    timesteps: &ts,
                    grad_norm,
                    param_norm: params.iter().map(|p| p * p).sum::<f64>().sqrt(),
                    non_finite_params: params.iter().filter(|p| !p.is_finite()).count(),
                },
            );
            return Err(Error::NonFinite(format!(
                "training loss {loss} (grad norm {grad_norm}) at iteration {k}"
            )));
        }
        timer.time("step", || {
            clip_grad_norm(&mut grad, cfg.optimizer.grad_clip);
            adam_step(theta.params_mut(), &grad, &mut adam);
            ema.update(theta.params());
        });

        let mut record = IterRecord {
            k,
            mean_t: ts.iter().sum::<usize>() as f64 / ts.len() as f64,
            train_loss: loss,
            delta_tilde: None,
            delta_full: None,
            subset: None,
            fallback: None,
            mean_a: None,
            mean_b: None,
            entropy: None,
            fwd_rows_delta: 0,
        };
        if !draws.is_empty() {
            let n = draws.len() as f64;
            record.mean_a = Some(draws.iter().map(|d| d.a).sum::<f64>() / n);
            record.mean_b = Some(draws.iter().map(|d| d.b).sum::<f64>() / n);
            let h: f64 = draws
                .iter()
                .map(|d| beta_entropy(d.a, d.b))
                .sum::<Result<f64>>()?;
            record.entropy = Some(h / n);
        }

        if let (Sampler::Adaptive(st), Some(before)) = (&mut sampler, before) {
            timer.time("alg2", || -> Result<()> {
                let rows0 = theta.counter().rows();
                let probe_id = probe_rng.random_range(0..data.len());
                let sweep_seed: u64 = probe_rng.random();
                let sweep = full_delta_sweep_seeded(
                    &before,
                    &theta,
                    &s,
                    &data.select(&[probe_id]),
                    sweep_seed,
                    ad.weighted,
                )?;
                push_sweep(&mut st.queue, DeltaSweep::new(sweep, k, probe_id)?);
                // With two sweeps every F has zero residual degrees of freedom and scores 0, so the
                // ranking would only reflect the tie-break; that is still the cold-start window.
                let selected = match select_timesteps(&st.queue, ad.subset_size) {
                    Ok(sub) if sub.f_scores.iter().all(|&f| f == 0.0) => {
                        Err(Error::QueueTooSmall {
                            len: st.queue.len(),
                        })
                    }
                    other => other,
                };
                let subset = match selected {
                    Ok(sub) => Some(sub),
                    Err(Error::QueueTooSmall { .. }) => match ad.fallback {
                        Fallback::Quartiles => Some(SelectedSubset::quartiles(steps)),
                        Fallback::Skip => None,
                    },
                    Err(e) => return Err(e),
                };
                let event_seed: u64 = probe_rng.random();
                counts.events += 1;
                let Some(subset) = subset else {
                    counts.delta += theta.counter().rows() - rows0;
                    record.fwd_rows_delta = theta.counter().rows() - rows0;
                    return Ok(());
                };
                let dt = approx_delta_seeded(
                    &before,
                    &theta,
                    &s,
                    &batch,
                    &subset,
                    event_seed,
                    ad.weighted,
                )?;
                let spent = theta.counter().rows() - rows0;
                counts.delta += spent;
                record.fwd_rows_delta = spent;
                if ad.track_full_delta {
                    let rows1 = theta.counter().rows();
                    let all: Vec<usize> = (1..=steps).collect();
                    let d =
                        batch_deltas(&before, &theta, &s, &batch, &all, event_seed, ad.weighted)?;
                    record.delta_full = Some(d.iter().sum::<f64>() / d.len() as f64);
                    counts.delta_full += theta.counter().rows() - rows1;
                }
                let reward = st.normalizer.normalize(dt);
                reinforce_step(
                    &mut st.phi,
                    batch.x0(),
                    &draws,
                    reward,
                    ad.ent_coef,
                    &mut st.opt,
                )?;
                record.delta_tilde = Some(dt);
                record.subset = Some(
                    subset
                        .timesteps
                        .iter()
                        .map(|t| t.to_string())
                        .collect::<Vec<_>>()
                        .join(";"),
                );
                record.fallback = Some(subset.fallback);
                Ok(())
            })?;
        }
        metrics.iterations.push(record);

        let done = k + 1;
        if done == iterations || (cfg.eval.every > 0 && done % cfg.eval.every == 0) {
            metrics
                .evals
                .push(evaluate(done, &theta, &ema, &mut gen_rng, &mut timer)?);
        }
    }

    let phi = match sampler {
        Sampler::Adaptive(st) => Some(st.phi),
        _ => None,
    };
    let checkpoint = Checkpoint {
        version: CHECKPOINT_VERSION,
        k: iterations,
        config: cfg.clone(),
        theta,
        ema,
        adam,
        phi,
    };
    if let Some(dir) = out {
        metrics.write_csv(dir)?;
        timer.write_json(&dir.join("timing.json"))?;
        checkpoint.save(&dir.join("checkpoint.json"))?;
        std::fs::write(
            dir.join("counts.json"),
            serde_json::to_string_pretty(&counts)?,
        )?;
    }
    Ok(TrainOutput {
        metrics,
        checkpoint,
        timing: timer,
        counts,
    })
}
