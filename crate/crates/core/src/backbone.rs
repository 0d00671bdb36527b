//! Asymmetric encoder-decoder diffusion transformer.
//!
//! Pipeline: linear patch embedding, fixed 2-D sin-cos positions on all
//! tokens, drop masked tokens, encoder blocks on the visible subset, project
//! to decoder width, re-insert the shared mask token at masked slots, add
//! positions again, decoder blocks on all `N` tokens, modulated layer norm
//! and a linear head back to `p*p*C` values per token.
//!
//! Parameters are registered in this order (checkpoint order):
//! `patch_embed`, `t_embed.fc1`, `t_embed.fc2`, `y_embed.table`,
//! `encoder.{i}.*`, `decoder_embed`, `mask_token`, `decoder.{i}.*`,
//! `final.adaln`, `final.linear`. Within a block: `adaln`, `attn.qkv`,
//! `attn.proj`, `mlp.fc1`, `mlp.fc2`; each linear has `.weight` (`in x out`)
//! then `.bias`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseLevel;
use crate::error::{Error, Result};
use crate::nn::block::{Block, BlockCache, Linear};
use crate::nn::init::{Init, Scheme};
use crate::nn::ops::{layer_norm_backward, layer_norm_forward, modulate_backward, modulate_forward, silu, silu_grad, timestep_features, sincos_2d, ModSlot};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{cast_slice, Scalar};

/// Max period of the sinusoidal noise-level features.
pub const TIME_MAX_PERIOD: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub patch_size: usize,
    pub num_classes: usize,
    pub encoder_depth: usize,
    pub encoder_width: usize,
    pub encoder_heads: usize,
    pub decoder_depth: usize,
    pub decoder_width: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: f64,
    pub time_freq_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_size: 16,
            in_channels: 1,
            patch_size: 2,
            num_classes: 2,
            encoder_depth: 6,
            encoder_width: 192,
            encoder_heads: 6,
            decoder_depth: 2,
            decoder_width: 96,
            decoder_heads: 6,
            mlp_ratio: 4.0,
            time_freq_dim: 64,
        }
    }
}

impl BackboneConfig {
    pub fn grid(&self) -> usize {
        self.input_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn token_len(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn encoder_mlp(&self) -> usize {
        (self.encoder_width as f64 * self.mlp_ratio).round() as usize
    }

    pub fn decoder_mlp(&self) -> usize {
        (self.decoder_width as f64 * self.mlp_ratio).round() as usize
    }

    /// The label index reserved for the null (unconditional) token.
    pub fn null_label(&self) -> usize {
        self.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.input_size == 0 || self.input_size % self.patch_size != 0 {
            return bad(format!(
                "patch size {} must divide input size {}",
                self.patch_size, self.input_size
            ));
        }
        if self.in_channels == 0 || self.num_classes == 0 {
            return bad("in_channels and num_classes must be positive".into());
        }
        for (name, w, h) in [
            ("encoder", self.encoder_width, self.encoder_heads),
            ("decoder", self.decoder_width, self.decoder_heads),
        ] {
            if w == 0 || h == 0 || w % h != 0 {
                return bad(format!("{name} width {w} must be a positive multiple of heads {h}"));
            }
            if w % 4 != 0 {
                return bad(format!("{name} width {w} must be divisible by 4 for 2-D positions"));
            }
        }
        if self.encoder_depth == 0 {
            return bad("encoder_depth must be positive".into());
        }
        if !(self.mlp_ratio > 0.0) || self.encoder_mlp() == 0 || self.decoder_mlp() == 0 {
            return bad(format!("mlp_ratio {} too small", self.mlp_ratio));
        }
        if self.time_freq_dim == 0 || self.time_freq_dim % 2 != 0 {
            return bad("time_freq_dim must be positive and even".into());
        }
        Ok(())
    }
}

/// Per-block token counts seen during one forward pass, per image.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ForwardTrace {
    pub encoder_tokens: Vec<usize>,
    pub decoder_tokens: Vec<usize>,
}

/// Noise-conditioning input and (possibly null) class label for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conditioning {
    pub c_noise: f64,
    pub label: usize,
}

pub struct BackboneInput<'a, T> {
    /// `samples x N x p*p*C`, already scaled by `c_in`.
    pub tokens: &'a [T],
    /// Ascending visible positions per sample; all of equal length.
    pub visible: &'a [Vec<usize>],
    pub cond: &'a [Conditioning],
}

pub struct ForwardCache<T> {
    samples: usize,
    visible: Vec<Vec<usize>>,
    labels: Vec<usize>,
    /// Visible input tokens, gathered.
    tokens: Vec<T>,
    t_feat: Vec<T>,
    t_h: Vec<T>,
    t_act: Vec<T>,
    cond: Vec<T>,
    cond_act: Vec<T>,
    enc_caches: Vec<BlockCache<T>>,
    enc_out: Vec<T>,
    dec_caches: Vec<BlockCache<T>>,
    final_mod: Vec<T>,
    final_xhat: Vec<T>,
    final_rstd: Vec<T>,
    final_h: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    patch_embed: Linear,
    t_fc1: Linear,
    t_fc2: Linear,
    y_table: ParamId,
    encoder: Vec<Block>,
    decoder_embed: Linear,
    mask_token: ParamId,
    decoder: Vec<Block>,
    final_adaln: Linear,
    final_linear: Linear,
    pos_enc: Vec<f64>,
    pos_dec: Vec<f64>,
}

impl Backbone {
    /// Builds the model layout and freshly initialized parameters.
    pub fn new<T: Scalar, R: Rng + ?Sized>(cfg: &BackboneConfig, scheme: Scheme, rng: &mut R) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut s = ParamStore::new();
        let (de, dd, p) = (cfg.encoder_width, cfg.decoder_width, cfg.token_len());
        let small = Init::Normal(0.02);

        let patch_embed = Linear::register(&mut s, "patch_embed", p, de, Init::Xavier, rng);
        let t_fc1 = Linear::register(&mut s, "t_embed.fc1", cfg.time_freq_dim, de, small, rng);
        let t_fc2 = Linear::register(&mut s, "t_embed.fc2", de, de, small, rng);
        let y_table = s.register("y_embed.table", &[cfg.num_classes + 1, de], small.values(cfg.num_classes + 1, de, rng));
        let encoder = (0..cfg.encoder_depth)
            .map(|i| Block::register(&mut s, &format!("encoder.{i}"), de, cfg.encoder_heads, cfg.encoder_mlp(), de, scheme, rng))
            .collect();
        let decoder_embed = Linear::register(&mut s, "decoder_embed", de, dd, Init::Xavier, rng);
        let mask_token = s.register("mask_token", &[dd], small.values(1, dd, rng));
        let decoder = (0..cfg.decoder_depth)
            .map(|i| Block::register(&mut s, &format!("decoder.{i}"), dd, cfg.decoder_heads, cfg.decoder_mlp(), de, scheme, rng))
            .collect();
        let final_adaln = Linear::register(&mut s, "final.adaln", de, 2 * dd, scheme.zero_or_dense(), rng);
        let final_linear = Linear::register(&mut s, "final.linear", dd, p, scheme.zero_or_dense(), rng);

        let g = cfg.grid();
        let model = Self {
            cfg: cfg.clone(),
            patch_embed,
            t_fc1,
            t_fc2,
            y_table,
            encoder,
            decoder_embed,
            mask_token,
            decoder,
            final_adaln,
            final_linear,
            pos_enc: sincos_2d(de, g, g),
            pos_dec: sincos_2d(dd, g, g),
        };
        Ok((model, s))
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn mask_token_id(&self) -> ParamId {
        self.mask_token
    }

    /// Parameter counts `(encoder side, decoder side)`.
    ///
    /// The encoder side is everything up to and including the encoder blocks
    /// (embeddings, conditioning MLP, class table); the decoder side is the
    /// projection, mask token, decoder blocks and output head.
    pub fn param_split<T: Scalar>(&self, store: &ParamStore<T>) -> (usize, usize) {
        let boundary = self.decoder_embed.weight.0;
        let mut enc = 0;
        let mut dec = 0;
        for (i, t) in store.tensors().iter().enumerate() {
            if i < boundary {
                enc += t.len();
            } else {
                dec += t.len();
            }
        }
        (enc, dec)
    }

    fn check_input<T: Scalar>(&self, input: &BackboneInput<'_, T>) -> Result<(usize, usize)> {
        let samples = input.cond.len();
        let n = self.cfg.num_tokens();
        let p = self.cfg.token_len();
        if input.tokens.len() != samples * n * p {
            return Err(Error::Shape(format!(
                "backbone expects {samples} x {n} x {p} token values, got {}",
                input.tokens.len()
            )));
        }
        if input.visible.len() != samples {
            return Err(Error::Shape(format!("{} visible lists for {samples} samples", input.visible.len())));
        }
        let nv = input.visible.first().map_or(n, Vec::len);
        if nv == 0 {
            return Err(Error::EmptyUnmasked);
        }
        for v in input.visible {
            if v.len() != nv {
                return Err(Error::Shape("visible token counts differ within a batch".into()));
            }
            if v.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Shape("visible indices must be strictly ascending".into()));
            }
            if let Some(&last) = v.last() {
                if last >= n {
                    return Err(Error::IndexOutOfRange { index: last, len: n });
                }
            }
        }
        for c in input.cond {
            if c.label > self.cfg.num_classes {
                return Err(Error::InvalidLabel {
                    label: c.label,
                    num_classes: self.cfg.num_classes,
                });
            }
        }
        Ok((samples, nv))
    }

    /// Embeds noise levels and labels: returns `(features, hidden, hidden_act, cond)`.
    fn embed_condition<T: Scalar>(&self, p: &ParamStore<T>, cond: &[Conditioning]) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
        let de = self.cfg.encoder_width;
        let samples = cond.len();
        let c_noise: Vec<f64> = cond.iter().map(|c| c.c_noise).collect();
        let t_feat = timestep_features::<T>(&c_noise, self.cfg.time_freq_dim, TIME_MAX_PERIOD);
        let t_h = self.t_fc1.forward(p, &t_feat, samples);
        let t_act: Vec<T> = t_h.iter().map(|&v| silu(v)).collect();
        let mut c = self.t_fc2.forward(p, &t_act, samples);
        let table = p.get(self.y_table);
        for (b, cd) in cond.iter().enumerate() {
            let row = &table[cd.label * de..(cd.label + 1) * de];
            for (o, &v) in c[b * de..(b + 1) * de].iter_mut().zip(row) {
                *o += v;
            }
        }
        (t_feat, t_h, t_act, c)
    }

    /// Conditioning vector (time MLP + class embedding) for one sample.
    pub fn condition_vector<T: Scalar>(&self, p: &ParamStore<T>, cond: Conditioning) -> Result<Vec<T>> {
        if cond.label > self.cfg.num_classes {
            return Err(Error::InvalidLabel {
                label: cond.label,
                num_classes: self.cfg.num_classes,
            });
        }
        Ok(self.embed_condition(p, &[cond]).3)
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        input: &BackboneInput<'_, T>,
        mut trace: Option<&mut ForwardTrace>,
    ) -> Result<(Vec<T>, ForwardCache<T>)> {
        let (samples, nv) = self.check_input(input)?;
        let cfg = &self.cfg;
        let (n, de, dd) = (cfg.num_tokens(), cfg.encoder_width, cfg.decoder_width);

        let (t_feat, t_h, t_act, cond) = self.embed_condition(p, input.cond);
        let cond_act: Vec<T> = cond.iter().map(|&v| silu(v)).collect();

        let tp = cfg.token_len();
        let mut gathered = Vec::with_capacity(samples * nv * tp);
        for (b, vis) in input.visible.iter().enumerate() {
            for &i in vis {
                gathered.extend_from_slice(&input.tokens[(b * n + i) * tp..(b * n + i + 1) * tp]);
            }
        }
        let mut x = self.patch_embed.forward(p, &gathered, samples * nv);
        let pos_enc: Vec<T> = cast_slice(&self.pos_enc);
        for (b, vis) in input.visible.iter().enumerate() {
            for (j, &i) in vis.iter().enumerate() {
                let row = &mut x[(b * nv + j) * de..(b * nv + j + 1) * de];
                row.iter_mut().zip(&pos_enc[i * de..(i + 1) * de]).for_each(|(a, &v)| *a += v);
            }
        }

        let mut enc_caches = Vec::with_capacity(self.encoder.len());
        for blk in &self.encoder {
            if let Some(t) = trace.as_deref_mut() {
                t.encoder_tokens.push(nv);
            }
            let (y, c) = blk.forward(p, x, nv, &cond_act);
            x = y;
            enc_caches.push(c);
        }
        let enc_out = x;

        let xd = self.decoder_embed.forward(p, &enc_out, samples * nv);
        let mask_token = p.get(self.mask_token);
        let pos_dec: Vec<T> = cast_slice(&self.pos_dec);
        let mut full = Vec::with_capacity(samples * n * dd);
        for (b, vis) in input.visible.iter().enumerate() {
            let mut next = 0;
            for i in 0..n {
                if next < vis.len() && vis[next] == i {
                    let r = b * nv + next;
                    full.extend_from_slice(&xd[r * dd..(r + 1) * dd]);
                    next += 1;
                } else {
                    full.extend_from_slice(mask_token);
                }
            }
        }
        for row in full.chunks_mut(n * dd) {
            row.iter_mut().zip(&pos_dec).for_each(|(a, &b)| *a += b);
        }

        let mut x = full;
        let mut dec_caches = Vec::with_capacity(self.decoder.len());
        for blk in &self.decoder {
            if let Some(t) = trace.as_deref_mut() {
                t.decoder_tokens.push(n);
            }
            let (y, c) = blk.forward(p, x, n, &cond_act);
            x = y;
            dec_caches.push(c);
        }

        let final_mod = self.final_adaln.forward(p, &cond_act, samples);
        let (final_xhat, final_rstd) = layer_norm_forward(&x, dd);
        let (shift, scale) = self.final_slots();
        let final_h = modulate_forward(&final_xhat, dd, n, &final_mod, shift, scale);
        let out = self.final_linear.forward(p, &final_h, samples * n);

        let cache = ForwardCache {
            samples,
            visible: input.visible.to_vec(),
            labels: input.cond.iter().map(|c| c.label).collect(),
            tokens: gathered,
            t_feat,
            t_h,
            t_act,
            cond,
            cond_act,
            enc_caches,
            enc_out,
            dec_caches,
            final_mod,
            final_xhat,
            final_rstd,
            final_h,
        };
        Ok((out, cache))
    }

    fn final_slots(&self) -> (ModSlot, ModSlot) {
        let w = 2 * self.cfg.decoder_width;
        (
            ModSlot { mod_width: w, offset: 0 },
            ModSlot {
                mod_width: w,
                offset: self.cfg.decoder_width,
            },
        )
    }

    /// Accumulates parameter gradients for `d out` into `grads`.
    pub fn backward<T: Scalar>(&self, p: &ParamStore<T>, cache: &ForwardCache<T>, dout: &[T], grads: &mut ParamStore<T>) {
        let cfg = &self.cfg;
        let (n, de, dd) = (cfg.num_tokens(), cfg.encoder_width, cfg.decoder_width);
        let samples = cache.samples;
        let nv = cache.visible.first().map_or(n, Vec::len);
        let mut dcond_act = vec![T::zero(); cache.cond_act.len()];

        // head
        let dh = self.final_linear.backward(p, grads, &cache.final_h, dout, samples * n, true).unwrap();
        let mut dmod = vec![T::zero(); cache.final_mod.len()];
        let (shift, scale) = self.final_slots();
        let dxhat = modulate_backward(&dh, &cache.final_xhat, dd, n, &cache.final_mod, &mut dmod, shift, scale);
        let dc = self.final_adaln.backward(p, grads, &cache.cond_act, &dmod, samples, true).unwrap();
        dcond_act.iter_mut().zip(&dc).for_each(|(a, &b)| *a += b);
        let mut dx = layer_norm_backward(&dxhat, &cache.final_xhat, &cache.final_rstd, dd);

        for (blk, c) in self.decoder.iter().zip(&cache.dec_caches).rev() {
            dx = blk.backward(p, grads, c, dx, &cache.cond_act, &mut dcond_act);
        }

        // un-scatter: masked rows feed the shared mask token
        let mut dxd = vec![T::zero(); samples * nv * dd];
        {
            let dmask = grads.get_mut(self.mask_token);
            for (b, vis) in cache.visible.iter().enumerate() {
                let mut next = 0;
                for i in 0..n {
                    let src = &dx[(b * n + i) * dd..(b * n + i + 1) * dd];
                    if next < vis.len() && vis[next] == i {
                        let r = b * nv + next;
                        dxd[r * dd..(r + 1) * dd].copy_from_slice(src);
                        next += 1;
                    } else {
                        dmask.iter_mut().zip(src).for_each(|(a, &g)| *a += g);
                    }
                }
            }
        }
        let mut dx = self.decoder_embed.backward(p, grads, &cache.enc_out, &dxd, samples * nv, true).unwrap();

        for (blk, c) in self.encoder.iter().zip(&cache.enc_caches).rev() {
            dx = blk.backward(p, grads, c, dx, &cache.cond_act, &mut dcond_act);
        }

        self.patch_embed.backward(p, grads, &cache.tokens, &dx, samples * nv, false);

        // conditioning: c = fc2(silu(fc1(features))) + table[label]
        let dcond: Vec<T> = dcond_act.iter().zip(&cache.cond).map(|(&g, &c)| g * silu_grad(c)).collect();
        {
            let dtable = grads.get_mut(self.y_table);
            for (b, &label) in cache.labels.iter().enumerate() {
                dtable[label * de..(label + 1) * de]
                    .iter_mut()
                    .zip(&dcond[b * de..(b + 1) * de])
                    .for_each(|(a, &g)| *a += g);
            }
        }
        let mut dt = self.t_fc2.backward(p, grads, &cache.t_act, &dcond, samples, true).unwrap();
        dt.iter_mut().zip(&cache.t_h).for_each(|(g, &h)| *g *= silu_grad(h));
        self.t_fc1.backward(p, grads, &cache.t_feat, &dt, samples, false);
    }
}

/// Replaces `label` with the null label with probability `p_uncond` in
/// training mode. A uniform draw is consumed in training mode regardless of
/// the outcome so the RNG stream does not depend on the label.
pub fn drop_label<R: Rng + ?Sized>(label: usize, null_label: usize, p_uncond: f64, rng: &mut R, train_mode: bool) -> usize {
    if !train_mode {
        return label;
    }
    let u: f64 = rng.random();
    if u < p_uncond {
        null_label
    } else {
        label
    }
}

/// Conditioning vector for one sample: sinusoidal features of `c_noise(sigma)`
/// through the two-layer MLP, plus the class embedding (null row when the
/// label is dropped).
pub fn condition_embed<T: Scalar, R: Rng + ?Sized>(
    model: &Backbone,
    params: &ParamStore<T>,
    sigma: NoiseLevel,
    label: usize,
    p_uncond: f64,
    rng: &mut R,
    train_mode: bool,
) -> Result<Vec<T>> {
    let cfg = model.config();
    if label > cfg.num_classes {
        return Err(Error::InvalidLabel {
            label,
            num_classes: cfg.num_classes,
        });
    }
    let label = drop_label(label, cfg.null_label(), p_uncond, rng, train_mode);
    model.condition_vector(
        params,
        Conditioning {
            c_noise: sigma.get().ln() / 4.0,
            label,
        },
    )
}
