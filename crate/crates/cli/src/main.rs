//! `tslab`: train diffusion models with different timestep samplers and run
//! the diagnostics around them.
//!
//! Every subcommand prints a JSON summary on stdout. Failures print
//! `{"error": <kind>, "message": <text>}` on stderr and exit with status 1
//! (2 for command-line usage errors).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use tslab_core::delta::{batch_deltas, SelectedSubset};
use tslab_core::diffusion::{ancestral_sample, SamplingOptions};
use tslab_core::harness::data::{make_split, write_samples_csv};
use tslab_core::harness::{train_into, Checkpoint, ExperimentConfig};
use tslab_core::profiler::{
    cost_model_eval, even_grid, interdependence_experiment, variance_profile, write_variance_csv,
    CostModel, InterdependenceConfig,
};
use tslab_core::rng::{stream, Stream};
use tslab_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "tslab",
    version,
    about = "Diffusion training lab with adaptive timestep sampling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model; writes metrics.csv, eval.csv, timing.json, counts.json and checkpoint.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-timestep gradient variance and loss of a checkpoint; appends to variance_profile.csv.
    ProfileVariance {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 50)]
        grid: usize,
        #[arg(long, default_value_t = 256)]
        n: usize,
        /// Profile the c_t-weighted loss instead of the plain ε-MSE.
        #[arg(long)]
        weighted: bool,
        #[arg(long, default_value = "variance_profile.csv")]
        out: PathBuf,
    },
    /// Continue training with t restricted to a range; writes interdependence.csv.
    Interdependence {
        #[arg(long)]
        ckpt: PathBuf,
        /// lo:hi, hi exclusive.
        #[arg(long, default_value = "1:200")]
        range: String,
        #[arg(long, default_value_t = 2000)]
        steps: u64,
        #[arg(long, default_value_t = 64)]
        probes: usize,
        #[arg(long, default_value = "interdependence.csv")]
        out: PathBuf,
    },
    /// Objective drop between two checkpoints on a probe batch.
    DeltaEval {
        #[arg(long)]
        ckpt_before: PathBuf,
        #[arg(long)]
        ckpt_after: PathBuf,
        /// Evaluate every timestep and write delta.csv (t, delta) instead of the quartile subset.
        #[arg(long)]
        full: bool,
        #[arg(long, default_value_t = 128)]
        batch: usize,
        #[arg(long, default_value = "delta.csv")]
        out: PathBuf,
    },
    /// Ancestral samples from a checkpoint; writes samples.csv.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value = "samples.csv")]
        out: PathBuf,
    },
    /// Analytic per-iteration cost of the adaptive sampler.
    CostModel {
        #[arg(long, default_value_t = 3)]
        subset: usize,
        #[arg(long, default_value_t = 128)]
        batch: usize,
        #[arg(long = "T", default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 40)]
        fs: usize,
    },
}

/// Seed for auxiliary randomness: the override variable if set, else the run seed.
fn aux_seed(ck: &Checkpoint) -> Result<u64> {
    let mut cfg = ck.config.clone();
    cfg.apply_env_seed()?;
    Ok(cfg.seed)
}

fn load_data(ck: &Checkpoint) -> Result<tslab_core::diffusion::DataBatch> {
    let cfg = &ck.config;
    Ok(make_split(&cfg.dataset, cfg.dataset.size, 0, cfg.dataset_seed())?.0)
}

fn parse_range(text: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("range {text:?} is not of the form lo:hi"));
    let (lo, hi) = text.split_once(':').ok_or_else(bad)?;
    Ok((
        lo.trim().parse().map_err(|_| bad())?,
        hi.trim().parse().map_err(|_| bad())?,
    ))
}

fn run(cmd: Command) -> Result<serde_json::Value> {
    match cmd {
        Command::Train { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let res = train_into(&cfg, Some(&out))?;
            let last = res.metrics.final_eval().expect("final evaluation");
            Ok(json!({
                "out": out,
                "iterations": cfg.iterations,
                "sampler_updates": res.metrics.sampler_updates(),
                "final_tracked_vlb": last.tracked_vlb,
                "best_tracked_vlb": last.best_vlb,
                "final_energy_distance": last.energy_distance,
                "forward_rows": res.counts,
                "seconds": res.timing.total(),
            }))
        }
        Command::ProfileVariance {
            ckpt,
            grid,
            n,
            weighted,
            out,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let s = ck.config.schedule.build()?;
            let data = load_data(&ck)?;
            let epoch = ck.k * ck.config.batch_size as u64 / data.len() as u64;
            let mut rng = stream(aux_seed(&ck)?, Stream::Profile);
            let prof = variance_profile(
                &ck.theta,
                &s,
                &data,
                &even_grid(s.steps(), grid),
                n,
                weighted,
                epoch,
                &mut rng,
            )?;
            write_variance_csv(&out, &prof)?;
            Ok(
                json!({ "out": out, "points": prof.t_grid.len(), "epoch": epoch, "weighted": weighted }),
            )
        }
        Command::Interdependence {
            ckpt,
            range,
            steps,
            probes,
            out,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let s = ck.config.schedule.build()?;
            let data = load_data(&ck)?;
            let cfg = InterdependenceConfig {
                range: parse_range(&range)?,
                steps,
                batch_size: ck.config.batch_size,
                grad_clip: ck.config.optimizer.grad_clip,
                probes,
                seed: aux_seed(&ck)?,
            };
            let res = interdependence_experiment(&ck.theta, &ck.adam, &s, &data, &cfg)?;
            res.write_csv(&out)?;
            let (lo, hi) = cfg.range;
            Ok(json!({
                "out": out,
                "mean_delta_inside": res.mean_delta_in(lo, hi - 1),
                "mean_delta_outside": if hi <= s.steps() { Some(res.mean_delta_in(hi, s.steps())) } else { None },
            }))
        }
        Command::DeltaEval {
            ckpt_before,
            ckpt_after,
            full,
            batch,
            out,
        } => {
            let before = Checkpoint::load(&ckpt_before)?;
            let after = Checkpoint::load(&ckpt_after)?;
            if before.theta.num_params() != after.theta.num_params()
                || before.theta.steps() != after.theta.steps()
            {
                return Err(Error::Checkpoint(
                    "checkpoints hold different architectures".into(),
                ));
            }
            let s = after.config.schedule.build()?;
            let data = load_data(&after)?;
            let seed = aux_seed(&after)?;
            // the dataset is i.i.d., so its leading rows are a fair probe batch
            let rows: Vec<usize> = (0..batch.clamp(1, data.len())).collect();
            let probe = data.select(&rows);
            let taus = if full {
                SelectedSubset::all(s.steps())
            } else {
                SelectedSubset::quartiles(s.steps())
            };
            let weighted = after.config.adaptive.weighted;
            let d = batch_deltas(
                &before.theta,
                &after.theta,
                &s,
                &probe,
                &taus.timesteps,
                seed,
                weighted,
            )?;
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            if full {
                let mut text = String::from("t,delta\n");
                for (t, v) in taus.timesteps.iter().zip(&d) {
                    text.push_str(&format!("{t},{v}\n"));
                }
                std::fs::write(&out, text)?;
            }
            Ok(json!({
                "timesteps": if full { json!("all") } else { json!(taus.timesteps) },
                "delta": mean,
                "weighted": weighted,
                "out": if full { Some(out) } else { None },
            }))
        }
        Command::Generate { ckpt, n, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let s = ck.config.schedule.build()?;
            let model = ck.eval_model()?;
            let mut rng = stream(aux_seed(&ck)?, Stream::Generate);
            let x = ancestral_sample(&model, &s, n, &mut rng, SamplingOptions::default())?;
            write_samples_csv(&out, x.view())?;
            Ok(json!({ "out": out, "n": n }))
        }
        Command::CostModel {
            subset,
            batch,
            steps,
            fs,
        } => {
            let e = cost_model_eval(&CostModel {
                subset_size: subset,
                batch,
                steps,
                f_s: fs,
            })?;
            Ok(json!({ "delta_cost": e.delta_cost, "overhead_ratio": e.overhead_ratio }))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            eprintln!(
                "{}",
                json!({ "error": "usage", "message": e.to_string().trim() })
            );
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
