//! Multi-head self-attention over per-sample token sequences.

use crate::tensor::Scalar;

/// Strided view into a flat buffer.
#[derive(Clone, Copy)]
struct View {
    offset: usize,
    rows: usize,
    cols: usize,
    row_stride: usize,
}

/// `c (= or +=) alpha * op(a) @ op(b)` on strided views.
#[allow(clippy::too_many_arguments)]
fn gemm_views<T: Scalar>(
    a: &[T],
    av: View,
    ta: bool,
    b: &[T],
    bv: View,
    tb: bool,
    c: &mut [T],
    cv: View,
    alpha: T,
    accumulate: bool,
) {
    let (m, k, rsa, csa) = if ta {
        (av.cols, av.rows, 1isize, av.row_stride as isize)
    } else {
        (av.rows, av.cols, av.row_stride as isize, 1)
    };
    let (k2, n, rsb, csb) = if tb {
        (bv.cols, bv.rows, 1isize, bv.row_stride as isize)
    } else {
        (bv.rows, bv.cols, bv.row_stride as isize, 1)
    };
    assert_eq!(k, k2);
    assert_eq!((m, n), (cv.rows, cv.cols));
    let end = |v: View| v.offset + (v.rows - 1) * v.row_stride + v.cols;
    assert!(end(av) <= a.len() && end(bv) <= b.len() && end(cv) <= c.len());
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: view extents are bounds-checked above; `c` is uniquely borrowed.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            rsa,
            csa,
            b.as_ptr().add(bv.offset),
            rsb,
            csb,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.row_stride as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttnShape {
    pub samples: usize,
    pub seq: usize,
    pub width: usize,
    pub heads: usize,
}

impl AttnShape {
    fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    fn qkv_view(&self, b: usize, h: usize, which: usize) -> View {
        View {
            offset: b * self.seq * 3 * self.width + which * self.width + h * self.head_dim(),
            rows: self.seq,
            cols: self.head_dim(),
            row_stride: 3 * self.width,
        }
    }

    fn out_view(&self, b: usize, h: usize) -> View {
        View {
            offset: b * self.seq * self.width + h * self.head_dim(),
            rows: self.seq,
            cols: self.head_dim(),
            row_stride: self.width,
        }
    }

    fn prob_view(&self, b: usize, h: usize) -> View {
        View {
            offset: (b * self.heads + h) * self.seq * self.seq,
            rows: self.seq,
            cols: self.seq,
            row_stride: self.seq,
        }
    }
}

/// Softmax attention given packed `qkv` (`samples*seq x 3*width`).
/// Returns the merged head outputs and the attention probabilities.
pub fn attention_forward<T: Scalar>(qkv: &[T], s: AttnShape) -> (Vec<T>, Vec<T>) {
    let l = s.seq;
    let scale = T::one() / T::from_usize(s.head_dim()).unwrap().sqrt();
    let mut probs = vec![T::zero(); s.samples * s.heads * l * l];
    let mut out = vec![T::zero(); s.samples * l * s.width];
    for b in 0..s.samples {
        for h in 0..s.heads {
            let pv = s.prob_view(b, h);
            gemm_views(qkv, s.qkv_view(b, h, 0), false, qkv, s.qkv_view(b, h, 1), true, &mut probs, pv, scale, false);
            for row in probs[pv.offset..pv.offset + l * l].chunks_mut(l) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                row.iter_mut().for_each(|v| *v = (*v - max).exp_act());
                let sum: T = row.iter().copied().sum();
                let inv = T::one() / sum;
                row.iter_mut().for_each(|v| *v *= inv);
            }
            gemm_views(&probs, pv, false, qkv, s.qkv_view(b, h, 2), false, &mut out, s.out_view(b, h), T::one(), false);
        }
    }
    (out, probs)
}

/// Gradient with respect to the packed `qkv` buffer.
pub fn attention_backward<T: Scalar>(dout: &[T], qkv: &[T], probs: &[T], s: AttnShape) -> Vec<T> {
    let l = s.seq;
    let scale = T::one() / T::from_usize(s.head_dim()).unwrap().sqrt();
    let mut dqkv = vec![T::zero(); qkv.len()];
    let mut dp = vec![T::zero(); l * l];
    let local = View {
        offset: 0,
        rows: l,
        cols: l,
        row_stride: l,
    };
    for b in 0..s.samples {
        for h in 0..s.heads {
            let pv = s.prob_view(b, h);
            let ov = s.out_view(b, h);
            // dV = P^T dO
            gemm_views(probs, pv, true, dout, ov, false, &mut dqkv, s.qkv_view(b, h, 2), T::one(), false);
            // dP = dO V^T
            gemm_views(dout, ov, false, qkv, s.qkv_view(b, h, 2), true, &mut dp, local, T::one(), false);
            let p = &probs[pv.offset..pv.offset + l * l];
            for i in 0..l {
                let pr = &p[i * l..(i + 1) * l];
                let dr = &mut dp[i * l..(i + 1) * l];
                let dot = pr.iter().zip(dr.iter()).map(|(&a, &g)| a * g).sum::<T>();
                for (g, &a) in dr.iter_mut().zip(pr) {
                    *g = a * (*g - dot) * scale;
                }
            }
            // dQ = dS K, dK = dS^T Q
            gemm_views(&dp, local, false, qkv, s.qkv_view(b, h, 1), false, &mut dqkv, s.qkv_view(b, h, 0), T::one(), false);
            gemm_views(&dp, local, true, qkv, s.qkv_view(b, h, 0), false, &mut dqkv, s.qkv_view(b, h, 1), T::one(), false);
        }
    }
    dqkv
}
