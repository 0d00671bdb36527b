//! Transformer block with adaptive layer-norm (adaLN-Zero) conditioning.
//!
//! Each sample's conditioning vector yields six modulation chunks
//! `(shift, scale, gate)` for the attention and MLP sub-layers. Gates are
//! zero-initialized so a fresh block is the identity map.

use rand::Rng;

use super::attention::{attention_backward, attention_forward, AttnShape};
use super::init;
use super::ops::*;
use super::params::{ParamId, ParamStore};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        weight_init: init::Init,
        rng: &mut R,
    ) -> Self {
        let w = weight_init.values(d_in, d_out, rng);
        let weight = store.register(format!("{name}.weight"), &[d_in, d_out], w);
        let bias = store.register(format!("{name}.bias"), &[d_out], vec![T::zero(); d_out]);
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &[T], rows: usize) -> Vec<T> {
        linear_forward(x, rows, p.get(self.weight), p.get(self.bias), self.d_in, self.d_out)
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        g: &mut ParamStore<T>,
        x: &[T],
        dy: &[T],
        rows: usize,
        want_dx: bool,
    ) -> Option<Vec<T>> {
        let mut dw = std::mem::take(&mut g.tensors_mut()[self.weight.0]);
        let mut db = std::mem::take(&mut g.tensors_mut()[self.bias.0]);
        let dx = linear_backward(x, dy, rows, p.get(self.weight), self.d_in, self.d_out, &mut dw, &mut db, want_dx);
        g.tensors_mut()[self.weight.0] = dw;
        g.tensors_mut()[self.bias.0] = db;
        dx
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub adaln: Linear,
    pub qkv: Linear,
    pub proj: Linear,
    pub fc1: Linear,
    pub fc2: Linear,
    pub width: usize,
    pub heads: usize,
}

pub struct BlockCache<T> {
    rows_per_sample: usize,
    samples: usize,
    modv: Vec<T>,
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    h1: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    attn: Vec<T>,
    a: Vec<T>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
    h2: Vec<T>,
    f1: Vec<T>,
    f1_tanh: Vec<T>,
    g: Vec<T>,
    m: Vec<T>,
}

impl Block {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        mlp_width: usize,
        cond_width: usize,
        scheme: init::Scheme,
        rng: &mut R,
    ) -> Self {
        let xavier = init::Init::Xavier;
        Self {
            adaln: Linear::register(store, &format!("{name}.adaln"), cond_width, 6 * width, scheme.zero_or_dense(), rng),
            qkv: Linear::register(store, &format!("{name}.attn.qkv"), width, 3 * width, xavier, rng),
            proj: Linear::register(store, &format!("{name}.attn.proj"), width, width, xavier, rng),
            fc1: Linear::register(store, &format!("{name}.mlp.fc1"), width, mlp_width, xavier, rng),
            fc2: Linear::register(store, &format!("{name}.mlp.fc2"), mlp_width, width, xavier, rng),
            width,
            heads,
        }
    }

    fn slot(&self, k: usize) -> ModSlot {
        ModSlot {
            mod_width: 6 * self.width,
            offset: k * self.width,
        }
    }

    /// `x` is `samples*seq x width`; `cond_act` is SiLU of the conditioning, `samples x cond_width`.
    pub fn forward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        mut x: Vec<T>,
        seq: usize,
        cond_act: &[T],
    ) -> (Vec<T>, BlockCache<T>) {
        let d = self.width;
        let samples = cond_act.len() / self.adaln.d_in;
        let rows = samples * seq;
        debug_assert_eq!(x.len(), rows * d);
        let modv = self.adaln.forward(p, cond_act, samples);

        let (xhat1, rstd1) = layer_norm_forward(&x, d);
        let h1 = modulate_forward(&xhat1, d, seq, &modv, self.slot(0), self.slot(1));
        let qkv = self.qkv.forward(p, &h1, rows);
        let shape = AttnShape {
            samples,
            seq,
            width: d,
            heads: self.heads,
        };
        let (attn, probs) = attention_forward(&qkv, shape);
        let a = self.proj.forward(p, &attn, rows);
        gated_residual_forward(&mut x, &a, d, seq, &modv, self.slot(2));

        let (xhat2, rstd2) = layer_norm_forward(&x, d);
        let h2 = modulate_forward(&xhat2, d, seq, &modv, self.slot(3), self.slot(4));
        let f1 = self.fc1.forward(p, &h2, rows);
        let (g, f1_tanh) = gelu_forward(&f1);
        let m = self.fc2.forward(p, &g, rows);
        gated_residual_forward(&mut x, &m, d, seq, &modv, self.slot(5));

        let cache = BlockCache {
            rows_per_sample: seq,
            samples,
            modv,
            xhat1,
            rstd1,
            h1,
            qkv,
            probs,
            attn,
            a,
            xhat2,
            rstd2,
            h2,
            f1,
            f1_tanh,
            g,
            m,
        };
        (x, cache)
    }

    /// Returns the gradient wrt the block input; accumulates into `grads` and `dcond_act`.
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        grads: &mut ParamStore<T>,
        cache: &BlockCache<T>,
        dout: Vec<T>,
        cond_act: &[T],
        dcond_act: &mut [T],
    ) -> Vec<T> {
        let d = self.width;
        let seq = cache.rows_per_sample;
        let rows = cache.samples * seq;
        let mut dmod = vec![T::zero(); cache.modv.len()];
        let mut dx = dout;

        // MLP branch
        let dm = gated_residual_backward(&dx, &cache.m, d, seq, &cache.modv, &mut dmod, self.slot(5));
        let mut dg = self.fc2.backward(p, grads, &cache.g, &dm, rows, true).unwrap();
        for ((gv, &f), &t) in dg.iter_mut().zip(&cache.f1).zip(&cache.f1_tanh) {
            *gv *= gelu_grad_from_tanh(f, t);
        }
        let dh2 = self.fc1.backward(p, grads, &cache.h2, &dg, rows, true).unwrap();
        let dxhat2 = modulate_backward(&dh2, &cache.xhat2, d, seq, &cache.modv, &mut dmod, self.slot(3), self.slot(4));
        let dln2 = layer_norm_backward(&dxhat2, &cache.xhat2, &cache.rstd2, d);
        dx.iter_mut().zip(&dln2).for_each(|(a, &b)| *a += b);

        // attention branch
        let da = gated_residual_backward(&dx, &cache.a, d, seq, &cache.modv, &mut dmod, self.slot(2));
        let dattn = self.proj.backward(p, grads, &cache.attn, &da, rows, true).unwrap();
        let shape = AttnShape {
            samples: cache.samples,
            seq,
            width: d,
            heads: self.heads,
        };
        let dqkv = attention_backward(&dattn, &cache.qkv, &cache.probs, shape);
        let dh1 = self.qkv.backward(p, grads, &cache.h1, &dqkv, rows, true).unwrap();
        let dxhat1 = modulate_backward(&dh1, &cache.xhat1, d, seq, &cache.modv, &mut dmod, self.slot(0), self.slot(1));
        let dln1 = layer_norm_backward(&dxhat1, &cache.xhat1, &cache.rstd1, d);
        dx.iter_mut().zip(&dln1).for_each(|(a, &b)| *a += b);

        let dc = self.adaln.backward(p, grads, cond_act, &dmod, cache.samples, true).unwrap();
        dcond_act.iter_mut().zip(&dc).for_each(|(a, &b)| *a += b);
        dx
    }
}
