//! Row-wise kernels with hand-written backward passes.
//!
//! Activations are row-major `rows x width` buffers; per-sample vectors
//! (conditioning, modulation) are broadcast over the `rows_per_sample`
//! rows belonging to each sample.

use crate::tensor::{matmul, MatRef, Scalar};

pub const LN_EPS: f64 = 1e-6;

/// `y = x @ w + b` with `w` stored `in x out`.
pub fn linear_forward<T: Scalar>(x: &[T], rows: usize, w: &[T], b: &[T], d_in: usize, d_out: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(rows * d_out);
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    matmul(MatRef::new(x, rows, d_in), MatRef::new(w, d_in, d_out), &mut y, true);
    y
}

/// Accumulates `dw += x^T dy`, `db += sum(dy)`; returns `dx = dy w^T` if asked.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    rows: usize,
    w: &[T],
    d_in: usize,
    d_out: usize,
    dw: &mut [T],
    db: &mut [T],
    want_dx: bool,
) -> Option<Vec<T>> {
    matmul(MatRef::new(x, rows, d_in).t(), MatRef::new(dy, rows, d_out), dw, true);
    for r in 0..rows {
        for (acc, &g) in db.iter_mut().zip(&dy[r * d_out..(r + 1) * d_out]) {
            *acc += g;
        }
    }
    want_dx.then(|| {
        let mut dx = vec![T::zero(); rows * d_in];
        matmul(MatRef::new(dy, rows, d_out), MatRef::new(w, d_in, d_out).t(), &mut dx, false);
        dx
    })
}

/// Parameter-free layer norm; returns `(xhat, rstd)`.
pub fn layer_norm_forward<T: Scalar>(x: &[T], width: usize) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / width;
    let eps = T::from_f64_lossy(LN_EPS);
    let inv_w = T::one() / T::from_usize(width).unwrap();
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().copied().sum::<T>() * inv_w;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_w;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for (o, &v) in xhat[r * width..(r + 1) * width].iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
    }
    (xhat, rstd)
}

pub fn layer_norm_backward<T: Scalar>(dxhat: &[T], xhat: &[T], rstd: &[T], width: usize) -> Vec<T> {
    let inv_w = T::one() / T::from_usize(width).unwrap();
    let mut dx = vec![T::zero(); dxhat.len()];
    for (r, &rs) in rstd.iter().enumerate() {
        let g = &dxhat[r * width..(r + 1) * width];
        let xh = &xhat[r * width..(r + 1) * width];
        let mean_g = g.iter().copied().sum::<T>() * inv_w;
        let mean_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * inv_w;
        for ((o, &gi), &xi) in dx[r * width..(r + 1) * width].iter_mut().zip(g).zip(xh) {
            *o = rs * (gi - mean_g - xi * mean_gx);
        }
    }
    dx
}

/// `h = xhat * (1 + scale[s]) + shift[s]`, where `shift`/`scale` are slices
/// of the per-sample modulation vector `modv` (`samples x mod_width`).
#[derive(Debug, Clone, Copy)]
pub struct ModSlot {
    pub mod_width: usize,
    pub offset: usize,
}

pub fn modulate_forward<T: Scalar>(
    xhat: &[T],
    width: usize,
    rows_per_sample: usize,
    modv: &[T],
    shift: ModSlot,
    scale: ModSlot,
) -> Vec<T> {
    let mut h = vec![T::zero(); xhat.len()];
    let rows = xhat.len() / width;
    for r in 0..rows {
        let s = r / rows_per_sample;
        let sh = &modv[s * shift.mod_width + shift.offset..][..width];
        let sc = &modv[s * scale.mod_width + scale.offset..][..width];
        let row = &xhat[r * width..(r + 1) * width];
        for j in 0..width {
            h[r * width + j] = row[j] * (T::one() + sc[j]) + sh[j];
        }
    }
    h
}

/// Returns `dxhat` and accumulates into `dmod` at the shift/scale slots.
#[allow(clippy::too_many_arguments)]
pub fn modulate_backward<T: Scalar>(
    dh: &[T],
    xhat: &[T],
    width: usize,
    rows_per_sample: usize,
    modv: &[T],
    dmod: &mut [T],
    shift: ModSlot,
    scale: ModSlot,
) -> Vec<T> {
    let rows = xhat.len() / width;
    let mut dxhat = vec![T::zero(); xhat.len()];
    for r in 0..rows {
        let s = r / rows_per_sample;
        let sc_off = s * scale.mod_width + scale.offset;
        let sh_off = s * shift.mod_width + shift.offset;
        for j in 0..width {
            let g = dh[r * width + j];
            dxhat[r * width + j] = g * (T::one() + modv[sc_off + j]);
            dmod[sc_off + j] += g * xhat[r * width + j];
            dmod[sh_off + j] += g;
        }
    }
    dxhat
}

/// `x += gate[s] * branch`, in place.
pub fn gated_residual_forward<T: Scalar>(
    x: &mut [T],
    branch: &[T],
    width: usize,
    rows_per_sample: usize,
    modv: &[T],
    gate: ModSlot,
) {
    let rows = x.len() / width;
    for r in 0..rows {
        let s = r / rows_per_sample;
        let g = &modv[s * gate.mod_width + gate.offset..][..width];
        for j in 0..width {
            x[r * width + j] += g[j] * branch[r * width + j];
        }
    }
}

/// Returns `dbranch`; accumulates the gate gradient. The residual path's
/// gradient is `dout` itself.
pub fn gated_residual_backward<T: Scalar>(
    dout: &[T],
    branch: &[T],
    width: usize,
    rows_per_sample: usize,
    modv: &[T],
    dmod: &mut [T],
    gate: ModSlot,
) -> Vec<T> {
    let rows = dout.len() / width;
    let mut db = vec![T::zero(); dout.len()];
    for r in 0..rows {
        let s = r / rows_per_sample;
        let off = s * gate.mod_width + gate.offset;
        for j in 0..width {
            let g = dout[r * width + j];
            db[r * width + j] = g * modv[off + j];
            dmod[off + j] += g * branch[r * width + j];
        }
    }
    db
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// tanh-approximate GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    gelu_with_tanh(x).0
}

/// GELU output together with the inner tanh, which the backward pass reuses.
pub fn gelu_with_tanh<T: Scalar>(x: T) -> (T, T) {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let u = c * (x + a * x * x * x);
    // tanh via exp; saturates cleanly to +-1 when exp overflows or underflows
    let e = (u + u).exp_act();
    let t = T::one() - (T::one() + T::one()) / (e + T::one());
    (half * x * (T::one() + t), t)
}

/// Elementwise GELU; returns the activations and the cached tanh values.
pub fn gelu_forward<T: Scalar>(x: &[T]) -> (Vec<T>, Vec<T>) {
    let c = T::from_f64_lossy(GELU_C);
    let ca = T::from_f64_lossy(GELU_C * GELU_A);
    let half = T::from_f64_lossy(0.5);
    let two = T::from_f64_lossy(2.0);
    let one = T::one();
    let mut y = vec![T::zero(); x.len()];
    let mut t = vec![T::zero(); x.len()];
    for ((yv, tv), &v) in y.iter_mut().zip(t.iter_mut()).zip(x) {
        let u = c * v + ca * v * v * v;
        let th = one - two / ((u + u).exp_act() + one);
        *tv = th;
        *yv = half * v * (one + th);
    }
    (y, t)
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    gelu_grad_from_tanh(x, gelu_with_tanh(x).1)
}

pub fn gelu_grad_from_tanh<T: Scalar>(x: T, t: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let du = c * (T::one() + three * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

pub fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp_act())
}

pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp_act());
    s * (T::one() + x * (T::one() - s))
}

/// Sinusoidal features `[cos(v f_k), sin(v f_k)]` with `f_k = max_period^(-k/half)`.
pub fn timestep_features<T: Scalar>(values: &[f64], dim: usize, max_period: f64) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); values.len() * dim];
    for (i, &v) in values.iter().enumerate() {
        for k in 0..half {
            let f = (-(max_period.ln()) * k as f64 / half as f64).exp();
            out[i * dim + k] = T::from_f64_lossy((v * f).cos());
            out[i * dim + half + k] = T::from_f64_lossy((v * f).sin());
        }
    }
    out
}

/// Fixed 2-D sine-cosine positional table, `grid_h * grid_w x dim`.
///
/// Half of the channels encode the row coordinate and half the column,
/// each with the standard 1-D `[sin, cos]` layout at base 10000.
pub fn sincos_2d<T: Scalar>(dim: usize, grid_h: usize, grid_w: usize) -> Vec<T> {
    assert!(dim % 4 == 0, "positional dim must be divisible by 4");
    let quarter = dim / 4;
    let mut out = vec![T::zero(); grid_h * grid_w * dim];
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let row = &mut out[(gy * grid_w + gx) * dim..][..dim];
            for (half, pos) in [(0usize, gy as f64), (1usize, gx as f64)] {
                for k in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
                    row[half * 2 * quarter + k] = T::from_f64_lossy((pos * omega).sin());
                    row[half * 2 * quarter + quarter + k] = T::from_f64_lossy((pos * omega).cos());
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn activation_grads_match_finite_differences() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            assert!((gelu_grad(x) - fd(gelu::<f64>, x)).abs() < 1e-8);
            assert!((silu_grad(x) - fd(silu::<f64>, x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let width = 5;
        let x: Vec<f64> = vec![0.3, -1.2, 2.0, 0.7, -0.1, 1.0, 1.5, -2.0, 0.0, 0.25];
        let weights: Vec<f64> = (0..10).map(|i| (i as f64 * 0.7).cos()).collect();
        let loss = |x: &[f64]| -> f64 {
            let (xh, _) = layer_norm_forward(x, width);
            xh.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let (xh, rs) = layer_norm_forward(&x, width);
        let dx = layer_norm_backward(&weights, &xh, &rs, width);
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += 1e-6;
            let mut xm = x.clone();
            xm[i] -= 1e-6;
            let num = (loss(&xp) - loss(&xm)) / 2e-6;
            assert!((num - dx[i]).abs() < 1e-7, "{i}: {num} vs {}", dx[i]);
        }
    }

    #[test]
    fn sincos_table_shape_and_origin() {
        let t: Vec<f64> = sincos_2d(8, 3, 4);
        assert_eq!(t.len(), 12 * 8);
        // position (0, 0): sin = 0, cos = 1 on both axes
        assert_eq!(&t[..8], &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        // rows of distinct positions differ
        assert_ne!(&t[8..16], &t[16..24]);
    }
}
