//! Deterministic probability-flow ODE sampling with Heun's method and
//! classifier-free guidance.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneInput, Conditioning};
use crate::diffusion::{combine_skip, EdmConstants, NoiseLevel};
use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::nn::ParamStore;
use crate::patch::{patchify, unpatchify};
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub rho: f64,
    pub guidance_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: 40,
            t_min: 0.002,
            t_max: 80.0,
            rho: 7.0,
            guidance_scale: 1.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps < 2 {
            return Err(Error::Config(format!("num_steps must be >= 2, got {}", self.num_steps)));
        }
        if !(self.t_min > 0.0 && self.t_min < self.t_max && self.t_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < t_min < t_max, got t_min = {}, t_max = {}",
                self.t_min, self.t_max
            )));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::Config(format!("rho must be positive, got {}", self.rho)));
        }
        if !(self.guidance_scale >= 1.0 && self.guidance_scale.is_finite()) {
            return Err(Error::Config(format!("guidance scale must be >= 1, got {}", self.guidance_scale)));
        }
        Ok(())
    }
}

/// `t_i = (t_max^(1/rho) + i/(N-1) (t_min^(1/rho) - t_max^(1/rho)))^rho` for
/// `i < N`, followed by a terminal `0`.
pub fn time_schedule(cfg: &SamplerConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = cfg.num_steps;
    let inv = 1.0 / cfg.rho;
    let (a, b) = (cfg.t_max.powf(inv), cfg.t_min.powf(inv));
    let mut ts: Vec<f64> = (0..n)
        .map(|i| (a + i as f64 / (n - 1) as f64 * (b - a)).powf(cfg.rho))
        .collect();
    // pin the endpoints against powf round-off
    ts[0] = cfg.t_max;
    ts[n - 1] = cfg.t_min;
    ts.push(0.0);
    Ok(ts)
}

/// `d_uncond + w (d_cond - d_uncond)`.
pub fn cfg_denoise<T: Scalar>(d_cond: &ImageBatch<T>, d_uncond: &ImageBatch<T>, w: f64) -> Result<ImageBatch<T>> {
    if w == 1.0 {
        d_cond.check_same_shape(d_uncond, "cfg_denoise")?;
        return Ok(d_cond.clone());
    }
    let w = T::from_f64_lossy(w);
    d_cond.zip_with(d_uncond, |c, u| u + w * (c - u))
}

/// One step of the probability-flow ODE `dx/dt = (x - D(x, t)) / t`.
///
/// Heun (trapezoidal corrector) when `t_next > 0`; plain Euler into the
/// terminal `t = 0`.
pub fn heun_step<T, F>(x: &ImageBatch<T>, t_cur: f64, t_next: f64, mut denoise_fn: F) -> Result<ImageBatch<T>>
where
    T: Scalar,
    F: FnMut(&ImageBatch<T>, f64) -> Result<ImageBatch<T>>,
{
    if !(t_cur > t_next && t_next >= 0.0) {
        return Err(Error::TimeOrder { t_cur, t_next });
    }
    let h = T::from_f64_lossy(t_next - t_cur);
    let inv_cur = T::from_f64_lossy(1.0 / t_cur);
    let den = denoise_fn(x, t_cur)?;
    let d = x.zip_with(&den, |xv, dv| (xv - dv) * inv_cur)?;
    let euler = x.zip_with(&d, |xv, dv| xv + h * dv)?;
    if t_next == 0.0 {
        return Ok(euler);
    }
    let inv_next = T::from_f64_lossy(1.0 / t_next);
    let den2 = denoise_fn(&euler, t_next)?;
    let d2 = euler.zip_with(&den2, |xv, dv| (xv - dv) * inv_next)?;
    let half = T::from_f64_lossy(0.5);
    let slope = d.zip_with(&d2, |a, b| half * (a + b))?;
    x.zip_with(&slope, |xv, s| xv + h * s)
}

/// Integrates from `x_init` (at `schedule[0]`) along the whole schedule.
pub fn integrate<T, F>(x_init: ImageBatch<T>, schedule: &[f64], mut denoise_fn: F) -> Result<ImageBatch<T>>
where
    T: Scalar,
    F: FnMut(&ImageBatch<T>, f64) -> Result<ImageBatch<T>>,
{
    let mut x = x_init;
    for w in schedule.windows(2) {
        x = heun_step(&x, w[0], w[1], &mut denoise_fn)?;
    }
    Ok(x)
}

/// Network evaluations performed during one sampling run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SampleStats {
    /// Evaluations of the (possibly guided) denoiser by the integrator.
    pub denoiser_evals: usize,
    pub cond_evals: usize,
    pub uncond_evals: usize,
}

/// The trained backbone wrapped as an EDM denoiser with every patch visible.
pub struct ModelDenoiser<'a, T> {
    pub model: &'a Backbone,
    pub params: &'a ParamStore<T>,
    pub consts: EdmConstants,
    /// Samples per forward pass.
    pub chunk: usize,
}

impl<T: Scalar> ModelDenoiser<'_, T> {
    pub fn denoise(&self, x: &ImageBatch<T>, t: f64, labels: &[usize]) -> Result<ImageBatch<T>> {
        let cfg = self.model.config();
        if labels.len() != x.batch {
            return Err(Error::Shape(format!("{} labels for {} images", labels.len(), x.batch)));
        }
        if (x.channels, x.height, x.width) != (cfg.in_channels, cfg.input_size, cfg.input_size) {
            return Err(Error::Shape(format!(
                "model expects {}x{}x{} images",
                cfg.in_channels, cfg.input_size, cfg.input_size
            )));
        }
        let sigma = NoiseLevel::new(t)?;
        let sc = self.consts.scalings(sigma);
        let c_in = T::from_f64_lossy(sc.c_in);
        let mut grid = patchify(x, cfg.patch_size)?;
        grid.tokens.iter_mut().for_each(|v| *v *= c_in);

        let n = cfg.num_tokens();
        let per_image = n * cfg.token_len();
        let all: Vec<usize> = (0..n).collect();
        let mut raw = Vec::with_capacity(grid.tokens.len());
        let chunk = self.chunk.max(1);
        for start in (0..x.batch).step_by(chunk) {
            let end = (start + chunk).min(x.batch);
            let visible = vec![all.clone(); end - start];
            let cond: Vec<Conditioning> = labels[start..end]
                .iter()
                .map(|&label| Conditioning {
                    c_noise: sc.c_noise,
                    label,
                })
                .collect();
            let input = BackboneInput {
                tokens: &grid.tokens[start * per_image..end * per_image],
                visible: &visible,
                cond: &cond,
            };
            let (out, _) = self.model.forward(self.params, &input, None)?;
            raw.extend(out);
        }
        let f = unpatchify(&grid.with_tokens(raw)?)?;
        combine_skip(x, &f, sc)
    }
}

/// Draws `x ~ N(0, t_max^2 I)` and integrates the guided ODE to `t = 0`.
///
/// With `guidance_scale == 1` only the conditional branch is evaluated;
/// otherwise each denoiser call runs the conditional and the null-label
/// branch and combines them with [`cfg_denoise`].
pub fn sample<T: Scalar, R: Rng + ?Sized>(
    denoiser: &ModelDenoiser<'_, T>,
    labels: &[usize],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<(ImageBatch<T>, SampleStats)> {
    let mcfg = denoiser.model.config();
    for &l in labels {
        if l > mcfg.num_classes {
            return Err(Error::InvalidLabel {
                label: l,
                num_classes: mcfg.num_classes,
            });
        }
    }
    let schedule = time_schedule(cfg)?;
    let (c, s) = (mcfg.in_channels, mcfg.input_size);
    let count = labels.len() * c * s * s;
    let t_max = T::from_f64_lossy(cfg.t_max);
    let noise: Vec<T> = (0..count)
        .map(|_| T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal)) * t_max)
        .collect();
    let x = ImageBatch::new(noise, labels.len(), c, s, s)?;
    let null = vec![mcfg.null_label(); labels.len()];

    let mut stats = SampleStats::default();
    let w = cfg.guidance_scale;
    let out = integrate(x, &schedule, |xt, t| {
        stats.denoiser_evals += 1;
        stats.cond_evals += 1;
        let d_cond = denoiser.denoise(xt, t, labels)?;
        if w == 1.0 {
            return Ok(d_cond);
        }
        stats.uncond_evals += 1;
        let d_uncond = denoiser.denoise(xt, t, &null)?;
        cfg_denoise(&d_cond, &d_uncond, w)
    })?;
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one(vals: Vec<f64>) -> ImageBatch<f64> {
        let n = vals.len();
        ImageBatch::new(vals, 1, 1, 1, n).unwrap()
    }

    #[test]
    fn schedule_endpoints_and_order() {
        let ts = time_schedule(&SamplerConfig::default()).unwrap();
        assert_eq!(ts.len(), 41);
        assert_eq!(ts[0], 80.0);
        assert_eq!(ts[39], 0.002);
        assert_eq!(ts[40], 0.0);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));

        let two = SamplerConfig {
            num_steps: 2,
            ..Default::default()
        };
        assert_eq!(time_schedule(&two).unwrap(), vec![80.0, 0.002, 0.0]);
    }

    #[test]
    fn schedule_matches_closed_form() {
        let cfg = SamplerConfig::default();
        let ts = time_schedule(&cfg).unwrap();
        for (i, &t) in ts.iter().enumerate().take(40) {
            // evaluated independently in the root-space parameterization
            let frac = i as f64 / 39.0;
            let root = 80f64.powf(1.0 / 7.0) * (1.0 - frac) + 0.002f64.powf(1.0 / 7.0) * frac;
            let want = root.powi(7);
            assert!((t - want).abs() <= 1e-13 * want, "{i}: {t} vs {want}");
        }
    }

    #[test]
    fn invalid_schedules() {
        for cfg in [
            SamplerConfig { num_steps: 1, ..Default::default() },
            SamplerConfig { t_min: 90.0, ..Default::default() },
            SamplerConfig { t_min: 0.0, ..Default::default() },
            SamplerConfig { guidance_scale: 0.5, ..Default::default() },
        ] {
            assert!(time_schedule(&cfg).is_err());
        }
    }

    #[test]
    fn cfg_identities() {
        let c = one(vec![1.0, 2.0]);
        let u = one(vec![0.0, 0.0]);
        assert_eq!(cfg_denoise(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_denoise(&one(vec![1.0]), &one(vec![0.0]), 2.0).unwrap().data, vec![2.0]);
        // affine in w
        let u = one(vec![0.3, -0.4]);
        let f = |w| cfg_denoise(&c, &u, w).unwrap().data;
        let (a, b, d) = (f(1.0), f(2.0), f(3.0));
        for i in 0..2 {
            assert!(((b[i] - a[i]) - (d[i] - b[i])).abs() < 1e-14);
        }
    }

    #[test]
    fn heun_step_contract() {
        let x = one(vec![1.0, -1.0]);
        let same = heun_step(&x, 2.0, 1.0, |v, _| Ok(v.clone())).unwrap();
        assert_eq!(same, x);
        assert!(matches!(
            heun_step(&x, 1.0, 1.0, |v, _| Ok(v.clone())),
            Err(Error::TimeOrder { .. })
        ));
        let mut calls = 0;
        heun_step(&x, 1.0, 0.0, |v, _| {
            calls += 1;
            Ok(v.clone())
        })
        .unwrap();
        assert_eq!(calls, 1);
    }

    #[test]
    fn heun_exact_on_dirac_flow() {
        let x_star = one(vec![0.5, -2.0, 1.25]);
        let x0 = one(vec![30.0, 70.0, -55.0]);
        let t0 = 80.0;
        let ts = time_schedule(&SamplerConfig::default()).unwrap();
        let mut x = x0.clone();
        for w in ts.windows(2) {
            x = heun_step(&x, w[0], w[1], |_, _| Ok(x_star.clone())).unwrap();
            for i in 0..3 {
                let exact = x_star.data[i] + (w[1] / t0) * (x0.data[i] - x_star.data[i]);
                let rel = (x.data[i] - exact).abs() / exact.abs().max(1e-12);
                assert!(rel <= 1e-10, "t = {}: {} vs {exact}", w[1], x.data[i]);
            }
        }
    }

    #[test]
    fn model_sampling_counts_evaluations() {
        use crate::backbone::BackboneConfig;
        use crate::nn::init::Scheme;
        let cfg = BackboneConfig {
            input_size: 4,
            encoder_depth: 1,
            encoder_width: 8,
            encoder_heads: 2,
            decoder_depth: 1,
            decoder_width: 8,
            decoder_heads: 2,
            ..BackboneConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (model, params) = Backbone::new::<f64, _>(&cfg, Scheme::Dense, &mut rng).unwrap();
        let den = ModelDenoiser {
            model: &model,
            params: &params,
            consts: EdmConstants::default(),
            chunk: 2,
        };
        let sc = SamplerConfig::default();
        let (x, stats) = sample(&den, &[0, 1, 1], &sc, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!((x.batch, x.height), (3, 4));
        assert_eq!(stats, SampleStats { denoiser_evals: 79, cond_evals: 79, uncond_evals: 0 });
        let guided = SamplerConfig { guidance_scale: 1.5, ..sc };
        let (_, stats) = sample(&den, &[0], &guided, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(stats.uncond_evals, 79);
        assert!(sample(&den, &[3], &sc, &mut rng).is_err());
    }
}
