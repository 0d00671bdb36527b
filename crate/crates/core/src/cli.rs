//! Command-line surface.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::backbone::Backbone;
use crate::config::{RunConfig, TuneSchedule};
use crate::efficiency::flops_count;
use crate::error::{Error, Result};
use crate::frechet::pixel_frechet;
use crate::image::ImageBatch;
use crate::nn::init::Scheme;
use crate::nn::ParamStore;
use crate::ppm::write_grid;
use crate::sampler::{sample, ModelDenoiser, SampleStats, SamplerConfig};
use crate::trainer::checkpoint::{load_checkpoint, load_for_config, Checkpoint};
use crate::trainer::dataset::make_batch;
use crate::trainer::{RunPlan, Trainer};

/// Samples per backbone forward pass during sampling.
const SAMPLE_CHUNK: usize = 64;

#[derive(Debug, Parser)]
#[command(name = "maskdit", version, about = "Masked diffusion transformer training and sampling")]
pub struct Cli {
    /// Seed for all randomness of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScheduleArg {
    Zero,
    Cosine,
}

impl From<ScheduleArg> for TuneSchedule {
    fn from(s: ScheduleArg) -> Self {
        match s {
            ScheduleArg::Zero => TuneSchedule::Zero,
            ScheduleArg::Cosine => TuneSchedule::Cosine,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Frechet,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Masked training followed by the configured tuning phase.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Unmasking tuning starting from a checkpoint.
    Tune {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "zero")]
        schedule: ScheduleArg,
        #[arg(long)]
        steps: u64,
        #[arg(long, default_value = "runs/tune")]
        out: PathBuf,
    },
    /// Writes a PPM grid of class-conditional samples.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "samples")]
        out: PathBuf,
        /// Use raw parameters instead of the EMA copy.
        #[arg(long)]
        no_ema: bool,
    },
    /// Scores generated samples against freshly drawn real images.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "frechet")]
        metric: Metric,
        #[arg(long, default_value_t = 1)]
        real_seed: u64,
        #[arg(long, default_value_t = 256)]
        count: usize,
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        no_ema: bool,
    },
    /// Prints the analytic per-forward cost as JSON.
    Flops {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        ratio: f64,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Generates one image per label from a checkpoint's EMA (or raw) weights.
pub fn generate(ckpt: &Checkpoint, labels: &[usize], sampler: &SamplerConfig, seed: u64, use_ema: bool) -> Result<(ImageBatch<f32>, SampleStats)> {
    let cfg = &ckpt.manifest.config;
    let (model, _) = Backbone::new::<f32, _>(&cfg.backbone, Scheme::Zero, &mut ChaCha8Rng::seed_from_u64(0))?;
    let params: &ParamStore<f32> = if use_ema { &ckpt.state.ema } else { &ckpt.state.params };
    let denoiser = ModelDenoiser {
        model: &model,
        params,
        consts: cfg.edm,
        chunk: SAMPLE_CHUNK,
    };
    sample(&denoiser, labels, sampler, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn sampler_for(cfg: &RunConfig, guidance: Option<f64>, steps: Option<usize>) -> Result<SamplerConfig> {
    let mut s = cfg.sampler.clone();
    if let Some(w) = guidance {
        s.guidance_scale = w;
    }
    if let Some(n) = steps {
        s.num_steps = n;
    }
    s.validate()?;
    Ok(s)
}

/// Runs one parsed command, writing user-facing output to `out`.
pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train { config, resume, out: dir } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(seed) = cli.seed {
                cfg.train.seed = seed;
            }
            let trainer = Trainer::new(&cfg)?;
            let state = match resume {
                Some(path) => load_for_config(&path, &cfg)?.state,
                None => trainer.init_state()?,
            };
            let outcome = trainer.run(state, RunPlan::from_config(&cfg), Some(&dir), None)?;
            if let Some(last) = outcome.log.last() {
                writeln!(out, "step {} loss {:.6}", last.step + 1, last.loss.total)?;
            }
            writeln!(out, "wrote {}", dir.display())?;
        }
        Command::Tune {
            config,
            ckpt,
            schedule,
            steps,
            out: dir,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(seed) = cli.seed {
                cfg.train.seed = seed;
            }
            cfg.train.tune_steps = steps;
            cfg.train.tune_schedule = schedule.into();
            let mut state = load_for_config(&ckpt, &cfg)?.state;
            if let Some(seed) = cli.seed {
                state.rng = ChaCha8Rng::seed_from_u64(seed);
            }
            let start = state.phase2_start.unwrap_or(state.step);
            let plan = RunPlan {
                phase1_end: start,
                tune_steps: steps,
                schedule: cfg.train.tune_schedule,
            };
            let trainer = Trainer::new(&cfg)?;
            let outcome = trainer.run(state, plan, Some(&dir), None)?;
            let masked: u64 = outcome.log.iter().map(|r| r.masked_draws).sum();
            writeln!(out, "tuned {} steps ({masked} masks drawn), wrote {}", outcome.log.len(), dir.display())?;
        }
        Command::Sample {
            ckpt,
            class,
            count,
            guidance,
            steps,
            out: dir,
            no_ema,
        } => {
            let ck = load_checkpoint(&ckpt)?;
            let cfg = &ck.manifest.config;
            if class >= cfg.backbone.num_classes {
                return Err(Error::InvalidLabel {
                    label: class,
                    num_classes: cfg.backbone.num_classes,
                });
            }
            let sampler = sampler_for(cfg, guidance, steps)?;
            let (images, stats) = generate(&ck, &vec![class; count], &sampler, cli.seed.unwrap_or(0), !no_ema)?;
            std::fs::create_dir_all(&dir)?;
            let path = dir.join(format!("class{class}.ppm"));
            write_grid(&images, &cfg.dataset, 8, &path)?;
            writeln!(
                out,
                "{}",
                json!({
                    "path": path.display().to_string(),
                    "denoiser_evals": stats.denoiser_evals,
                    "cond_evals": stats.cond_evals,
                    "uncond_evals": stats.uncond_evals,
                })
            )?;
        }
        Command::Eval {
            ckpt,
            metric: Metric::Frechet,
            real_seed,
            count,
            guidance,
            steps,
            no_ema,
        } => {
            let ck = load_checkpoint(&ckpt)?;
            let cfg = &ck.manifest.config;
            let sampler = sampler_for(cfg, guidance, steps)?;
            let labels: Vec<usize> = (0..count).map(|i| i % cfg.backbone.num_classes).collect();
            let (generated, _) = generate(&ck, &labels, &sampler, cli.seed.unwrap_or(0), !no_ema)?;
            let real = make_batch::<f32, _>(&cfg.dataset, count, &mut ChaCha8Rng::seed_from_u64(real_seed))?.images;
            let value = pixel_frechet(&real, &generated)?;
            writeln!(out, "{}", json!({ "metric": "frechet", "value": value, "count": count }))?;
        }
        Command::Flops { config, ratio } => {
            let cfg = load_config(config.as_deref())?;
            let report = flops_count(&cfg.backbone, cfg.backbone.num_tokens(), ratio)?;
            writeln!(out, "{}", serde_json::to_string(&report)?)?;
        }
    }
    Ok(())
}
