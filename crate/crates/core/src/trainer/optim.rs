use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Scalar;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment estimates and the update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

impl AdamW {
    pub fn step<T: Scalar>(&self, params: &mut ParamStore<T>, grads: &ParamStore<T>, state: &mut AdamState<T>) {
        state.t += 1;
        let t = state.t as i32;
        let c = |v: f64| T::from_f64_lossy(v);
        let (b1, b2) = (c(self.beta1), c(self.beta2));
        let (one_b1, one_b2) = (c(1.0 - self.beta1), c(1.0 - self.beta2));
        let bc1 = c(1.0 - self.beta1.powi(t));
        let bc2 = c(1.0 - self.beta2.powi(t));
        let lr = c(self.lr);
        let eps = c(self.eps);
        let decay = c(1.0 - self.lr * self.weight_decay);
        for i in 0..params.len() {
            let p = &mut params.tensors_mut()[i];
            let g = &grads.tensors()[i];
            let m = &mut state.m.tensors_mut()[i];
            let v = &mut state.v.tensors_mut()[i];
            for j in 0..p.len() {
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] = p[j] * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// `ema <- decay * ema + (1 - decay) * params`.
pub fn ema_update<T: Scalar>(ema: &mut ParamStore<T>, params: &ParamStore<T>, decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::Config(format!("EMA decay must be in [0, 1), got {decay}")));
    }
    ema.check_layout(params)?;
    let d = T::from_f64_lossy(decay);
    let one_d = T::from_f64_lossy(1.0 - decay);
    for (e, p) in ema.tensors_mut().iter_mut().zip(params.tensors()) {
        for (ev, &pv) in e.iter_mut().zip(p) {
            *ev = d * *ev + one_d * pv;
        }
    }
    Ok(())
}

/// Decay used after `updates` EMA updates: the configured decay, capped by
/// `(1 + updates) / (10 + updates)` while warming up so early averages are
/// not dominated by the initialization.
pub fn effective_ema_decay(decay: f64, updates: u64, warmup: bool) -> f64 {
    if warmup {
        let u = updates as f64;
        decay.min((1.0 + u) / (10.0 + u))
    } else {
        decay
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.register("w", &[vals.len()], vals.to_vec());
        s
    }

    #[test]
    fn ema_decay_zero_copies() {
        let mut e = store(&[1.0, 2.0]);
        let p = store(&[5.0, -3.0]);
        ema_update(&mut e, &p, 0.0).unwrap();
        assert_eq!(e, p);
        assert!(ema_update(&mut e, &p, 1.0).is_err());
    }

    #[test]
    fn ema_contracts_geometrically() {
        let mut e = store(&[0.0, 4.0]);
        let p = store(&[1.0, 1.0]);
        let decay = 0.9999;
        let mut dist = (e.tensors()[0][0] - 1.0).hypot(e.tensors()[0][1] - 1.0);
        for _ in 0..5 {
            ema_update(&mut e, &p, decay).unwrap();
            let d = (e.tensors()[0][0] - 1.0).hypot(e.tensors()[0][1] - 1.0);
            assert!((d / dist - decay).abs() < 1e-12);
            dist = d;
        }
    }

    #[test]
    fn warmup_caps_decay() {
        assert_eq!(effective_ema_decay(0.9999, 0, true), 0.1);
        assert_eq!(effective_ema_decay(0.9999, 0, false), 0.9999);
        assert_eq!(effective_ema_decay(0.9999, 10_000_000, true), 0.9999);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = store(&[1.0, -1.0, 0.5]);
        let g = store(&[0.3, -2.0, 0.0]);
        let opt = AdamW {
            lr: 0.01,
            ..Default::default()
        };
        let mut st = AdamState::new(&p);
        opt.step(&mut p, &g, &mut st);
        // bias-corrected first step is lr * sign(g) up to eps
        let v = &p.tensors()[0];
        assert!((v[0] - 0.99).abs() < 1e-6);
        assert!((v[1] + 0.99).abs() < 1e-6);
        assert_eq!(v[2], 0.5);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = store(&[3.0, -2.0]);
        let opt = AdamW {
            lr: 0.05,
            ..Default::default()
        };
        let mut st = AdamState::new(&p);
        for _ in 0..2000 {
            let g = store(&p.tensors()[0].iter().map(|v| 2.0 * v).collect::<Vec<_>>());
            opt.step(&mut p, &g, &mut st);
        }
        assert!(p.tensors()[0].iter().all(|v| v.abs() < 1e-2));
    }
}
