//! Segmentation losses (Dice + focal), the language cross-entropy, and the
//! loss report. Batched functions return one value per item so callers
//! control the reduction.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::dataset::PAD;
use crate::emotion::Emotion;
use crate::error::{Error, Result};
use crate::nn::log_softmax;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    pub alpha_pos: f64,
    pub alpha_neg: f64,
    pub gamma: f64,
}

impl FocalParams {
    /// Standard convention: weight `alpha` on positives, `1 - alpha` on negatives.
    pub fn from_alpha(alpha: f64, gamma: f64) -> Self {
        FocalParams {
            alpha_pos: alpha,
            alpha_neg: 1.0 - alpha,
            gamma,
        }
    }
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `(N, ...)` -> `(N, P)`.
fn per_item(t: &Tensor) -> Result<Tensor> {
    let n = t.dims().first().copied().unwrap_or(1);
    Ok(t.reshape((n, t.elem_count() / n.max(1)))?)
}

/// `log sigmoid(x) = min(x, 0) - ln(1 + exp(-|x|))`, stable for any x.
pub fn log_sigmoid(x: &Tensor) -> Result<Tensor> {
    let neg_abs = x.abs()?.neg()?;
    let soft = (neg_abs.exp()? + 1.0)?.log()?;
    Ok((x.minimum(0.0)? - soft)?)
}

/// Dice on probabilities: `1 - (2 sum(pg) + eps) / (sum(p) + sum(g) + eps)`
/// per item of an `(N, ...)` batch.
pub fn dice_from_probs(probs: &Tensor, gt: &Tensor, eps: f64) -> Result<Tensor> {
    check_same(probs, gt, "dice")?;
    let p = per_item(probs)?;
    let g = per_item(gt)?;
    let inter = (&p * &g)?.sum(1)?;
    let denom = ((p.sum(1)? + g.sum(1)?)? + eps)?;
    let ratio = ((inter * 2.0)? + eps)?.div(&denom)?;
    Ok(ratio.neg()?.affine(1.0, 1.0)?)
}

/// Dice on logits, `(N, ...)` -> `(N,)`.
pub fn dice_loss_batch(logits: &Tensor, gt: &Tensor, eps: f64) -> Result<Tensor> {
    check_same(logits, gt, "dice")?;
    let probs = log_sigmoid(logits)?.exp()?;
    dice_from_probs(&probs, gt, eps)
}

/// Pixel-mean focal loss per item, `(N, ...)` -> `(N,)`.
/// With `s = x` on positives and `-x` on negatives, `log p_t = logsig(s)`
/// and `1 - p_t = exp(logsig(-s))`.
pub fn focal_loss_batch(logits: &Tensor, gt: &Tensor, params: FocalParams) -> Result<Tensor> {
    check_same(logits, gt, "focal")?;
    let x = per_item(logits)?;
    let g = per_item(gt)?;
    let sign = g.affine(2.0, -1.0)?;
    let s = (&x * &sign)?;
    let log_pt = log_sigmoid(&s)?;
    let modulator = if params.gamma == 0.0 {
        s.ones_like()?
    } else {
        (log_sigmoid(&s.neg()?)? * params.gamma)?.exp()?
    };
    let alpha = g.affine(params.alpha_pos - params.alpha_neg, params.alpha_neg)?;
    let per_px = (alpha * modulator)?.mul(&log_pt)?.neg()?;
    Ok(per_px.mean(1)?)
}

/// Token-mean cross-entropy per sequence. `logits (B, L, V)` row `t` is
/// scored against `gold[b][t + 1]`; PAD targets are excluded from both the
/// sum and the count. A sequence with no valid target scores 0.
pub fn lang_loss_batch(logits: &Tensor, gold: &[Vec<u32>], pad: u32) -> Result<Tensor> {
    let (b, l, _v) = logits.dims3()?;
    if gold.len() != b || gold.iter().any(|g| g.len() != l) {
        return Err(Error::Shape(format!(
            "language loss: logits {:?} vs {} gold rows",
            logits.dims(),
            gold.len()
        )));
    }
    let mut targets = vec![0u32; b * l];
    let mut weights = vec![0f64; b * l];
    for (i, row) in gold.iter().enumerate() {
        let valid: Vec<usize> = (0..l.saturating_sub(1)).filter(|&t| row[t + 1] != pad).collect();
        if valid.is_empty() {
            log::warn!("sequence {i} has no non-PAD target; its language loss is 0");
        }
        for &t in &valid {
            targets[i * l + t] = row[t + 1];
            weights[i * l + t] = 1.0 / valid.len() as f64;
        }
    }
    let device = logits.device();
    let targets = Tensor::from_vec(targets, (b, l, 1), device)?;
    let weights = Tensor::from_vec(weights, (b, l), device)?.to_dtype(logits.dtype())?;
    let lp = log_softmax(logits)?.gather(&targets, D::Minus1)?.squeeze(D::Minus1)?;
    Ok((lp * weights)?.sum(1)?.neg()?)
}

fn scalar(t: Tensor) -> Result<Tensor> {
    Ok(t.squeeze(0)?)
}

/// Dice loss of one `R x R` logit map against its binary target.
pub fn dice_loss(logits: &Tensor, gt: &Tensor, eps: f64) -> Result<Tensor> {
    scalar(dice_loss_batch(&logits.unsqueeze(0)?, &gt.unsqueeze(0)?, eps)?)
}

pub fn focal_loss(logits: &Tensor, gt: &Tensor, params: FocalParams) -> Result<Tensor> {
    scalar(focal_loss_batch(&logits.unsqueeze(0)?, &gt.unsqueeze(0)?, params)?)
}

/// Cross-entropy of one `(L, V)` logit sequence against `gold` (length L).
pub fn lang_loss(logits: &Tensor, gold: &[u32], pad: u32) -> Result<Tensor> {
    scalar(lang_loss_batch(&logits.unsqueeze(0)?, &[gold.to_vec()], pad)?)
}

pub fn lang_loss_default_pad(logits: &Tensor, gold: &[u32]) -> Result<Tensor> {
    lang_loss(logits, gold, PAD)
}

pub fn to_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EmotionLoss {
    pub mask: f64,
    pub lang: f64,
}

/// Reduced loss components for one batch or accumulation window.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub dice: f64,
    pub focal: f64,
    pub lang: f64,
    pub total: f64,
    /// Multi-mask mode only: annotated emotions and their summed terms.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_emotion: BTreeMap<Emotion, EmotionLoss>,
}

impl LossReport {
    pub fn new(dice: f64, focal: f64, lang: f64) -> Self {
        LossReport {
            dice,
            focal,
            lang,
            total: dice + focal + lang,
            per_emotion: BTreeMap::new(),
        }
    }

    /// Sum two reports (accumulation windows add).
    pub fn accumulate(&mut self, other: &LossReport) {
        self.dice += other.dice;
        self.focal += other.focal;
        self.lang += other.lang;
        self.total = self.dice + self.focal + self.lang;
        for (e, l) in &other.per_emotion {
            let slot = self.per_emotion.entry(*e).or_default();
            slot.mask += l.mask;
            slot.lang += l.lang;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.dice.is_finite() && self.focal.is_finite() && self.lang.is_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(data.to_vec(), shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn dice_fixtures() {
        let ones = t(&[1.0; 4], &[1, 2, 2]);
        let zeros = t(&[0.0; 4], &[1, 2, 2]);
        let v = |x: Tensor| x.to_vec1::<f64>().unwrap()[0];
        assert_eq!(v(dice_from_probs(&ones, &ones, 1.0).unwrap()), 0.0);
        assert!((v(dice_from_probs(&zeros, &ones, 1.0).unwrap()) - 0.8).abs() < 1e-12);
        assert_eq!(v(dice_from_probs(&zeros, &zeros, 1.0).unwrap()), 0.0);
    }

    #[test]
    fn focal_single_pixel() {
        let x = t(&[0.0], &[1, 1]);
        let g = t(&[1.0], &[1, 1]);
        let l = to_f64(&focal_loss(&x, &g, FocalParams::from_alpha(0.25, 2.0)).unwrap()).unwrap();
        let expected = 0.25 * 0.25 * std::f64::consts::LN_2;
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.043321).abs() < 1e-6);
    }

    #[test]
    fn focal_saturated_is_zero() {
        let x = t(&[30.0, -30.0, 30.0, -30.0], &[2, 2]);
        let g = t(&[1.0, 0.0, 1.0, 0.0], &[2, 2]);
        let l = to_f64(&focal_loss(&x, &g, FocalParams::from_alpha(0.25, 2.0)).unwrap()).unwrap();
        assert!(l < 1e-9);
    }

    #[test]
    fn lang_uniform_and_padding() {
        let logits = Tensor::zeros((4, 16), DType::F64, &Device::Cpu).unwrap();
        let l = to_f64(&lang_loss(&logits, &[1, 5, 6, 2], PAD).unwrap()).unwrap();
        assert!((l - 16f64.ln()).abs() < 1e-9);

        let logits = Tensor::randn(0f64, 1.0, (6, 16), &Device::Cpu).unwrap();
        let padded = to_f64(&lang_loss(&logits, &[1, 5, 6, 2, PAD, PAD], PAD).unwrap()).unwrap();
        let trimmed = to_f64(&lang_loss(&logits.narrow(0, 0, 4).unwrap(), &[1, 5, 6, 2], PAD).unwrap()).unwrap();
        assert!((padded - trimmed).abs() < 1e-12);

        let all_pad = to_f64(&lang_loss(&logits, &[PAD; 6], PAD).unwrap()).unwrap();
        assert_eq!(all_pad, 0.0);
    }

    #[test]
    fn shape_mismatch_errors() {
        let a = t(&[0.0; 4], &[2, 2]);
        let b = t(&[0.0; 6], &[2, 3]);
        assert!(matches!(dice_loss(&a, &b, 1.0), Err(Error::Shape(_))));
        assert!(matches!(focal_loss(&a, &b, FocalParams::from_alpha(0.25, 2.0)), Err(Error::Shape(_))));
        let logits = Tensor::zeros((1, 3, 5), DType::F64, &Device::Cpu).unwrap();
        assert!(lang_loss_batch(&logits, &[vec![1, 2]], PAD).is_err());
    }

    #[test]
    fn report_identity() {
        let r = LossReport::new(0.3, 0.1, 1.7);
        assert_eq!(r.total, r.dice + r.focal + r.lang);
        let mut acc = LossReport::default();
        acc.accumulate(&r);
        acc.accumulate(&r);
        assert_eq!(acc.total, acc.dice + acc.focal + acc.lang);
    }
}
