//! Masked training objective: denoising score matching on unmasked tokens,
//! MAE-style reconstruction of the diffused input on masked tokens, and
//! their weighted sum.
//!
//! Predictions and targets are per-image token sequences (`N x p*p*C`,
//! flattened). Reductions are means over contributing elements.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::MaskPattern;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DsmMode {
    /// Score matching only on visible tokens.
    #[default]
    UnmaskedOnly,
    /// Score matching on all tokens (ablation).
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dsm: f64,
    pub mae: f64,
    pub total: f64,
    pub lambda: f64,
}

fn check_lengths<T>(pred: &[T], target: &[T], token_len: usize, m: &MaskPattern) -> Result<()> {
    if token_len == 0 || pred.len() != target.len() || pred.len() != m.len() * token_len {
        return Err(Error::Shape(format!(
            "prediction {} / target {} values vs {} tokens of length {token_len}",
            pred.len(),
            target.len(),
            m.len()
        )));
    }
    Ok(())
}

fn dsm_counts(m: &MaskPattern, mode: DsmMode) -> usize {
    match mode {
        DsmMode::UnmaskedOnly => m.num_visible(),
        DsmMode::Full => m.len(),
    }
}

fn dsm_contributes(m: &MaskPattern, mode: DsmMode, i: usize) -> bool {
    mode == DsmMode::Full || !m.is_masked(i)
}

/// Weighted mean squared error between the denoiser output and clean tokens.
pub fn dsm_loss<T: Scalar>(
    pred: &[T],
    x0: &[T],
    token_len: usize,
    m: &MaskPattern,
    mode: DsmMode,
    weight: f64,
) -> Result<f64> {
    check_lengths(pred, x0, token_len, m)?;
    let count = dsm_counts(m, mode);
    if count == 0 {
        return Err(Error::EmptyUnmasked);
    }
    let mut acc = 0.0;
    for i in (0..m.len()).filter(|&i| dsm_contributes(m, mode, i)) {
        let r = i * token_len..(i + 1) * token_len;
        acc += pred[r.clone()]
            .iter()
            .zip(&x0[r])
            .map(|(&a, &b)| (a - b).as_f64().powi(2))
            .sum::<f64>();
    }
    Ok(weight * acc / (count * token_len) as f64)
}

/// Adds `scale * d dsm_loss / d pred` into `grad`.
#[allow(clippy::too_many_arguments)]
pub fn dsm_loss_grad<T: Scalar>(
    pred: &[T],
    x0: &[T],
    token_len: usize,
    m: &MaskPattern,
    mode: DsmMode,
    weight: f64,
    scale: f64,
    grad: &mut [T],
) -> Result<()> {
    check_lengths(pred, x0, token_len, m)?;
    let count = dsm_counts(m, mode);
    if count == 0 {
        return Err(Error::EmptyUnmasked);
    }
    let k = T::from_f64_lossy(2.0 * weight * scale / (count * token_len) as f64);
    for i in (0..m.len()).filter(|&i| dsm_contributes(m, mode, i)) {
        for j in i * token_len..(i + 1) * token_len {
            grad[j] += k * (pred[j] - x0[j]);
        }
    }
    Ok(())
}

/// Mean squared error on masked tokens against the diffused input `x0 + n`.
/// Zero when nothing is masked.
pub fn mae_loss<T: Scalar>(pred: &[T], noisy: &[T], token_len: usize, m: &MaskPattern) -> Result<f64> {
    check_lengths(pred, noisy, token_len, m)?;
    let count = m.num_masked();
    if count == 0 {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for i in (0..m.len()).filter(|&i| m.is_masked(i)) {
        let r = i * token_len..(i + 1) * token_len;
        acc += pred[r.clone()]
            .iter()
            .zip(&noisy[r])
            .map(|(&a, &b)| (a - b).as_f64().powi(2))
            .sum::<f64>();
    }
    Ok(acc / (count * token_len) as f64)
}

pub fn mae_loss_grad<T: Scalar>(
    pred: &[T],
    noisy: &[T],
    token_len: usize,
    m: &MaskPattern,
    scale: f64,
    grad: &mut [T],
) -> Result<()> {
    check_lengths(pred, noisy, token_len, m)?;
    let count = m.num_masked();
    if count == 0 {
        return Ok(());
    }
    let k = T::from_f64_lossy(2.0 * scale / (count * token_len) as f64);
    for i in (0..m.len()).filter(|&i| m.is_masked(i)) {
        for j in i * token_len..(i + 1) * token_len {
            grad[j] += k * (pred[j] - noisy[j]);
        }
    }
    Ok(())
}

pub fn total_loss(dsm: f64, mae: f64, lambda: f64) -> LossBreakdown {
    debug_assert!(lambda >= 0.0);
    LossBreakdown {
        dsm,
        mae,
        total: dsm + lambda * mae,
        lambda,
    }
}
