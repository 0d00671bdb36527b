//! Training orchestration: per-step randomness, the masked objective with
//! its gradient, optimizer + EMA updates, and the two-phase run (masked
//! training followed by optional unmasking tuning).

pub mod checkpoint;
pub mod dataset;
pub mod metrics;
pub mod optim;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backbone::{drop_label, Backbone, BackboneInput, Conditioning};
use crate::config::{RunConfig, TuneSchedule};
use crate::diffusion::{loss_weight, sample_training_sigma, EdmConstants, NoiseLevel};
use crate::error::{Error, Result};
use crate::nn::init::Scheme;
use crate::nn::ParamStore;
use crate::objective::{dsm_loss, dsm_loss_grad, mae_loss, mae_loss_grad, total_loss, DsmMode, LossBreakdown};
use crate::patch::{cosine_ratio, patchify, sample_mask, MaskPattern, TokenGrid};
use crate::tensor::Scalar;

use dataset::{make_batch, LabeledBatch};
use metrics::MetricsWriter;
use optim::{ema_update, effective_ema_decay, AdamState, AdamW};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParamStore<f32>,
    pub ema: ParamStore<f32>,
    pub adam: AdamState<f32>,
    pub step: u64,
    pub rng: ChaCha8Rng,
    /// Global step at which unmasking tuning began, once it has.
    pub phase2_start: Option<u64>,
}

impl TrainState {
    pub fn new(params: ParamStore<f32>, rng: ChaCha8Rng) -> Self {
        Self {
            ema: params.clone(),
            adam: AdamState::new(&params),
            params,
            step: 0,
            rng,
            phase2_start: None,
        }
    }
}

/// Everything random about one training step, drawn up front.
#[derive(Debug, Clone)]
pub struct StepBatch<T> {
    pub x0: TokenGrid<T>,
    /// Unit Gaussian noise in token layout.
    pub eps: Vec<T>,
    pub sigmas: Vec<NoiseLevel>,
    pub masks: Vec<MaskPattern>,
    /// Labels after conditioning dropout.
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    pub dsm_mode: DsmMode,
    pub mae_weighted: bool,
    pub consts: EdmConstants,
}

/// Draws noise levels, noise, per-image masks and label dropout for a batch.
/// Returns the batch and how many masks were sampled with `r > 0`.
pub fn draw_step<T: Scalar, R: Rng + ?Sized>(
    data: &LabeledBatch<T>,
    patch_size: usize,
    ratio: f64,
    p_uncond: f64,
    null_label: usize,
    consts: &EdmConstants,
    rng: &mut R,
) -> Result<(StepBatch<T>, u64)> {
    let x0 = patchify(&data.images, patch_size)?;
    let n = x0.num_tokens();
    let per_image = n * x0.token_len();
    let mut sigmas = Vec::with_capacity(x0.batch);
    let mut eps = Vec::with_capacity(x0.tokens.len());
    let mut masks = Vec::with_capacity(x0.batch);
    let mut labels = Vec::with_capacity(x0.batch);
    let mut masked_draws = 0;
    for &label in &data.labels {
        sigmas.push(sample_training_sigma(rng, consts));
        eps.extend((0..per_image).map(|_| T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal))));
        if ratio > 0.0 {
            masked_draws += 1;
            masks.push(sample_mask(n, ratio, rng)?);
        } else {
            masks.push(MaskPattern::none(n));
        }
        labels.push(drop_label(label, null_label, p_uncond, rng, true));
    }
    Ok((
        StepBatch {
            x0,
            eps,
            sigmas,
            masks,
            labels,
        },
        masked_draws,
    ))
}

/// Batch-mean loss and, if requested, its gradient with respect to `params`.
///
/// Per image: `x = x0 + sigma * eps`, the backbone sees `c_in * x` on visible
/// tokens only, `D = c_skip * (x masked to visible tokens) + c_out * F`, then
/// DSM against `x0` (weighted by the EDM loss weight) and reconstruction of
/// `x` on masked tokens.
pub fn batch_loss<T: Scalar>(
    model: &Backbone,
    params: &ParamStore<T>,
    batch: &StepBatch<T>,
    obj: &ObjectiveConfig,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<ParamStore<T>>)> {
    let x0 = &batch.x0;
    let b = x0.batch;
    let p = x0.token_len();
    let per_image = x0.num_tokens() * p;
    if batch.sigmas.len() != b || batch.masks.len() != b || batch.labels.len() != b || batch.eps.len() != x0.tokens.len() {
        return Err(Error::Shape("step batch fields disagree on batch size".into()));
    }

    let scalings: Vec<_> = batch.sigmas.iter().map(|&s| obj.consts.scalings(s)).collect();
    let mut x = x0.tokens.clone();
    let mut scaled = vec![T::zero(); x.len()];
    for i in 0..b {
        let s = T::from_f64_lossy(batch.sigmas[i].get());
        let c_in = T::from_f64_lossy(scalings[i].c_in);
        for j in i * per_image..(i + 1) * per_image {
            x[j] += s * batch.eps[j];
            scaled[j] = c_in * x[j];
        }
    }
    let visible: Vec<Vec<usize>> = batch.masks.iter().map(MaskPattern::visible_indices).collect();
    let cond: Vec<Conditioning> = (0..b)
        .map(|i| Conditioning {
            c_noise: scalings[i].c_noise,
            label: batch.labels[i],
        })
        .collect();
    let input = BackboneInput {
        tokens: &scaled,
        visible: &visible,
        cond: &cond,
    };
    let (raw, cache) = model.forward(params, &input, None)?;

    // The denoiser only receives visible tokens, so its skip path is zero at masked slots.
    let mut denoised = vec![T::zero(); raw.len()];
    for i in 0..b {
        let (cs, co) = (T::from_f64_lossy(scalings[i].c_skip), T::from_f64_lossy(scalings[i].c_out));
        for k in 0..x0.num_tokens() {
            let skip = if batch.masks[i].is_masked(k) { T::zero() } else { cs };
            for j in i * per_image + k * p..i * per_image + (k + 1) * p {
                denoised[j] = skip * x[j] + co * raw[j];
            }
        }
    }

    let mut dsm = 0.0;
    let mut mae = 0.0;
    let mut d_denoised = want_grad.then(|| vec![T::zero(); raw.len()]);
    let inv_b = 1.0 / b as f64;
    for i in 0..b {
        let r = i * per_image..(i + 1) * per_image;
        let m = &batch.masks[i];
        let w = loss_weight(batch.sigmas[i], &obj.consts);
        let mae_w = if obj.mae_weighted { w } else { 1.0 };
        dsm += inv_b * dsm_loss(&denoised[r.clone()], &x0.tokens[r.clone()], p, m, obj.dsm_mode, w)?;
        mae += inv_b * mae_w * mae_loss(&denoised[r.clone()], &x[r.clone()], p, m)?;
        if let Some(g) = d_denoised.as_mut() {
            let gi = &mut g[r.clone()];
            dsm_loss_grad(&denoised[r.clone()], &x0.tokens[r.clone()], p, m, obj.dsm_mode, w, inv_b, gi)?;
            mae_loss_grad(&denoised[r.clone()], &x[r.clone()], p, m, obj.lambda * mae_w * inv_b, gi)?;
        }
    }
    let loss = total_loss(dsm, mae, obj.lambda);

    let grads = match d_denoised {
        Some(mut g) => {
            for i in 0..b {
                let co = T::from_f64_lossy(scalings[i].c_out);
                g[i * per_image..(i + 1) * per_image].iter_mut().for_each(|v| *v *= co);
            }
            let mut grads = params.zeros_like();
            model.backward(params, &cache, &g, &mut grads);
            Some(grads)
        }
        None => None,
    };
    Ok((loss, grads))
}

/// Hyperparameters for a single update.
#[derive(Debug, Clone, Copy)]
pub struct StepHyper {
    pub ratio: f64,
    pub p_uncond: f64,
    pub objective: ObjectiveConfig,
    pub optimizer: AdamW,
    pub ema_decay: f64,
    pub ema_warmup: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub phase: u8,
    pub mask_ratio: f64,
    pub sigma_mean: f64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub lr: f64,
    /// Masks sampled with `r > 0` during this step.
    pub masked_draws: u64,
}

pub fn train_step(model: &Backbone, state: &mut TrainState, data: &LabeledBatch<f32>, hyper: &StepHyper) -> Result<StepReport> {
    let cfg = model.config();
    let (batch, masked_draws) = draw_step(
        data,
        cfg.patch_size,
        hyper.ratio,
        hyper.p_uncond,
        cfg.null_label(),
        &hyper.objective.consts,
        &mut state.rng,
    )?;
    let (loss, grads) = batch_loss(model, &state.params, &batch, &hyper.objective, true)?;
    let grads = grads.expect("gradient requested");
    let grad_norm = grads.global_norm();
    if !(loss.total.is_finite() && grad_norm.is_finite()) {
        let sigmas: Vec<f64> = batch.sigmas.iter().map(|s| s.get()).collect();
        return Err(Error::NonFiniteLoss {
            step: state.step,
            detail: format!(
                "dsm = {}, mae = {}, grad_norm = {grad_norm}, ratio = {}, sigmas = {sigmas:?}, labels = {:?}",
                loss.dsm, loss.mae, hyper.ratio, batch.labels
            ),
        });
    }
    hyper.optimizer.step(&mut state.params, &grads, &mut state.adam);
    let decay = effective_ema_decay(hyper.ema_decay, state.step + 1, hyper.ema_warmup);
    ema_update(&mut state.ema, &state.params, decay)?;
    let report = StepReport {
        step: state.step,
        phase: 1,
        mask_ratio: hyper.ratio,
        sigma_mean: batch.sigmas.iter().map(|s| s.get()).sum::<f64>() / batch.sigmas.len() as f64,
        loss,
        grad_norm,
        lr: hyper.optimizer.lr,
        masked_draws,
    };
    state.step += 1;
    Ok(report)
}

/// Where the two phases sit on the global step axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunPlan {
    /// Masked training runs for steps `[0, phase1_end)`.
    pub phase1_end: u64,
    pub tune_steps: u64,
    pub schedule: TuneSchedule,
}

impl RunPlan {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            phase1_end: cfg.train.steps,
            tune_steps: cfg.train.tune_steps,
            schedule: cfg.train.tune_schedule,
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.phase1_end + self.tune_steps
    }
}

/// Phase-2 mask ratio at tuning step `i` of `total`.
pub fn tune_ratio(schedule: TuneSchedule, i: u64, total: u64) -> Result<f64> {
    match schedule {
        TuneSchedule::Zero => Ok(0.0),
        TuneSchedule::Cosine => cosine_ratio(i as usize, total.max(1) as usize),
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<StepReport>,
}

pub struct Trainer {
    cfg: RunConfig,
    model: Backbone,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        // layout only; values come from `init_state` or a checkpoint
        let (model, _) = Backbone::new::<f32, _>(&cfg.backbone, Scheme::Zero, &mut ChaCha8Rng::seed_from_u64(0))?;
        Ok(Self { cfg: cfg.clone(), model })
    }

    pub fn model(&self) -> &Backbone {
        &self.model
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    /// Fresh state: parameters initialized from the seeded stream, which
    /// then continues as the training RNG.
    pub fn init_state(&self) -> Result<TrainState> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.train.seed);
        let (_, params) = Backbone::new::<f32, _>(&self.cfg.backbone, Scheme::Zero, &mut rng)?;
        Ok(TrainState::new(params, rng))
    }

    fn hyper(&self, ratio: f64, lr: f64) -> StepHyper {
        let t = &self.cfg.train;
        StepHyper {
            ratio,
            p_uncond: t.p_uncond,
            objective: ObjectiveConfig {
                lambda: t.lambda,
                dsm_mode: t.dsm_mode,
                mae_weighted: t.mae_weighted,
                consts: self.cfg.edm,
            },
            optimizer: AdamW {
                lr,
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.adam_eps,
                weight_decay: t.weight_decay,
            },
            ema_decay: t.ema_decay,
            ema_warmup: t.ema_warmup,
        }
    }

    /// Runs from `state.step` to the end of `plan`, or until `stop_at`.
    ///
    /// With an output directory: metrics go to `metrics.csv`, the initial
    /// state to `init.mdit` (fresh runs only), periodic checkpoints to
    /// `latest.mdit`, and the final state to `final.mdit`.
    pub fn run(&self, mut state: TrainState, plan: RunPlan, out_dir: Option<&Path>, stop_at: Option<u64>) -> Result<TrainOutcome> {
        let t = &self.cfg.train;
        let mut metrics = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                if state.step == 0 {
                    checkpoint::save_checkpoint(&state, &self.cfg, &dir.join("init.mdit"))?;
                }
                Some(MetricsWriter::open(&dir.join("metrics.csv"), state.step, t.record_wallclock)?)
            }
            None => None,
        };
        let started = Instant::now();
        let end = stop_at.map_or(plan.total_steps(), |s| s.min(plan.total_steps()));
        let mut log = Vec::new();
        while state.step < end {
            let (phase, ratio, lr, batch_size) = if state.step < plan.phase1_end {
                (1u8, t.mask_ratio, t.lr, t.batch_size)
            } else {
                let start = *state.phase2_start.get_or_insert(state.step);
                let ratio = tune_ratio(plan.schedule, state.step - start, plan.tune_steps)?;
                (2u8, ratio, t.tune_lr, t.tune_batch_size)
            };
            let data = make_batch::<f32, _>(&self.cfg.dataset, batch_size, &mut state.rng)?;
            let step_result = train_step(&self.model, &mut state, &data, &self.hyper(ratio, lr));
            let mut report = match step_result {
                Ok(r) => r,
                Err(e) => {
                    if let (Some(dir), Error::NonFiniteLoss { .. }) = (out_dir, &e) {
                        let _ = std::fs::write(dir.join("diagnostic.txt"), format!("{e}\n"));
                    }
                    return Err(e);
                }
            };
            report.phase = phase;
            if let Some(m) = metrics.as_mut() {
                m.write(&report, started.elapsed().as_secs_f64())?;
            }
            log.push(report);
            if let Some(dir) = out_dir {
                if t.checkpoint_every > 0 && state.step % t.checkpoint_every == 0 {
                    if let Some(m) = metrics.as_mut() {
                        m.flush()?;
                    }
                    checkpoint::save_checkpoint(&state, &self.cfg, &dir.join("latest.mdit"))?;
                }
            }
        }
        if let Some(m) = metrics.as_mut() {
            m.flush()?;
        }
        if let Some(dir) = out_dir {
            let name = if state.step >= plan.total_steps() { "final.mdit" } else { "latest.mdit" };
            checkpoint::save_checkpoint(&state, &self.cfg, &dir.join(name))?;
        }
        Ok(TrainOutcome { state, log })
    }
}

/// Convenience: trains `cfg` from scratch (or from `resume`) into `out_dir`.
pub fn run_training(cfg: &RunConfig, resume: Option<TrainState>, out_dir: Option<PathBuf>) -> Result<TrainOutcome> {
    let trainer = Trainer::new(cfg)?;
    let state = match resume {
        Some(s) => s,
        None => trainer.init_state()?,
    };
    trainer.run(state, RunPlan::from_config(cfg), out_dir.as_deref(), None)
}
