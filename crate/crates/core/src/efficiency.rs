//! Analytic per-forward FLOP counts (one image, multiply-accumulate = 2 FLOPs).
//!
//! Counted: every matrix product in the forward pass, i.e. the patch
//! embedding on visible tokens, the noise-level MLP, per-block adaLN
//! projections, attention (qkv, scores, weighted sum, output projection),
//! MLPs, the decoder projection, the final adaLN and the output head.
//! Elementwise work (norms, activations, softmax, residuals) is not counted.

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, ForwardTrace};
use crate::error::{Error, Result};
use crate::patch::{check_ratio, masked_count};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub encoder_flops: u64,
    pub decoder_flops: u64,
    pub head_flops: u64,
    pub total_flops: u64,
    pub visible_tokens: usize,
    pub ratio_vs_unmasked: f64,
}

fn linear(rows: usize, d_in: usize, d_out: usize) -> u64 {
    2 * (rows * d_in * d_out) as u64
}

/// `2 (4 n d^2 + 2 n^2 d)`: qkv and output projections plus scores and
/// the weighted sum.
pub fn attention_flops(n: usize, d: usize) -> u64 {
    let (n, d) = (n as u64, d as u64);
    2 * (4 * n * d * d + 2 * n * n * d)
}

pub fn mlp_flops(n: usize, d: usize, d_mlp: usize) -> u64 {
    2 * (2 * n * d * d_mlp) as u64
}

/// One transformer block on `n` tokens of width `d`, conditioned on a
/// vector of width `d_cond`.
pub fn block_flops(n: usize, d: usize, d_mlp: usize, d_cond: usize) -> u64 {
    attention_flops(n, d) + mlp_flops(n, d, d_mlp) + linear(1, d_cond, 6 * d)
}

fn raw_count(cfg: &BackboneConfig, n_total: usize, r: f64) -> (u64, u64, u64, usize) {
    let (de, dd, p) = (cfg.encoder_width, cfg.decoder_width, cfg.token_len());
    let nv = n_total - masked_count(n_total, r);
    let encoder = linear(nv, p, de)
        + linear(1, cfg.time_freq_dim, de)
        + linear(1, de, de)
        + cfg.encoder_depth as u64 * block_flops(nv, de, cfg.encoder_mlp(), de);
    let decoder = linear(nv, de, dd) + cfg.decoder_depth as u64 * block_flops(n_total, dd, cfg.decoder_mlp(), de);
    let head = linear(1, de, 2 * dd) + linear(n_total, dd, p);
    (encoder, decoder, head, nv)
}

pub fn flops_count(cfg: &BackboneConfig, n_total: usize, r: f64) -> Result<CostReport> {
    cfg.validate()?;
    check_ratio(r)?;
    if n_total == 0 {
        return Err(Error::Config("token count must be positive".into()));
    }
    let (encoder_flops, decoder_flops, head_flops, visible_tokens) = raw_count(cfg, n_total, r);
    let total_flops = encoder_flops + decoder_flops + head_flops;
    let (e0, d0, h0, _) = raw_count(cfg, n_total, 0.0);
    Ok(CostReport {
        encoder_flops,
        decoder_flops,
        head_flops,
        total_flops,
        visible_tokens,
        ratio_vs_unmasked: total_flops as f64 / (e0 + d0 + h0) as f64,
    })
}

/// Checks that every encoder block saw `N - floor(rN)` tokens and every
/// decoder block saw `N`.
pub fn verify_token_counts(trace: &ForwardTrace, r: f64, n_total: usize) -> Result<()> {
    check_ratio(r)?;
    let want = n_total - masked_count(n_total, r);
    let enc_ok = !trace.encoder_tokens.is_empty() && trace.encoder_tokens.iter().all(|&c| c == want);
    let dec_ok = !trace.decoder_tokens.is_empty() && trace.decoder_tokens.iter().all(|&c| c == n_total);
    if enc_ok && dec_ok {
        Ok(())
    } else {
        Err(Error::TokenCount(format!(
            "expected encoder {want} / decoder {n_total} per block, got encoder {:?} / decoder {:?}",
            trace.encoder_tokens, trace.decoder_tokens
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unmasked_ratio_is_one() {
        let cfg = BackboneConfig::default();
        let c = flops_count(&cfg, 64, 0.0).unwrap();
        assert_eq!(c.ratio_vs_unmasked, 1.0);
        assert_eq!(c.total_flops, c.encoder_flops + c.decoder_flops + c.head_flops);
    }

    #[test]
    fn visible_count_for_256_tokens() {
        let cfg = BackboneConfig {
            input_size: 32,
            ..BackboneConfig::default()
        };
        let c = flops_count(&cfg, 256, 0.5).unwrap();
        assert_eq!(c.visible_tokens, 128);
        assert!(c.ratio_vs_unmasked > 0.45 && c.ratio_vs_unmasked < 0.65, "{}", c.ratio_vs_unmasked);
    }

    #[test]
    fn attention_ratio_matches_closed_form() {
        // at half the tokens the linear part halves and the quadratic part quarters
        let (n, d) = (256usize, 192usize);
        let lin = (8 * n * d * d) as f64;
        let quad = (4 * n * n * d) as f64;
        let want = (lin / 2.0 + quad / 4.0) / (lin + quad);
        let got = attention_flops(n / 2, d) as f64 / attention_flops(n, d) as f64;
        assert!((got - want).abs() < 1e-15);
        assert!(got < 0.5);
    }

    #[test]
    fn mismatched_trace_fails() {
        let t = ForwardTrace {
            encoder_tokens: vec![32, 31],
            decoder_tokens: vec![64, 64],
        };
        assert!(matches!(verify_token_counts(&t, 0.5, 64), Err(Error::TokenCount(_))));
        let ok = ForwardTrace {
            encoder_tokens: vec![32, 32],
            decoder_tokens: vec![64, 64],
        };
        verify_token_counts(&ok, 0.5, 64).unwrap();
    }

    proptest! {
        #[test]
        fn monotone_in_ratio(a in 0.0f64..0.99, b in 0.0f64..0.99) {
            let cfg = BackboneConfig::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let x = flops_count(&cfg, 64, lo).unwrap();
            let y = flops_count(&cfg, 64, hi).unwrap();
            prop_assert!(y.total_flops <= x.total_flops);
            prop_assert!(y.ratio_vs_unmasked <= 1.0);
        }
    }
}
