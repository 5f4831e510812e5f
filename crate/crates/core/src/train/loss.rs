//! BCE + Dice segmentation loss with deep supervision.
//!
//! For logits `x` and a binary target `t` with `p = sigmoid(x)`:
//!
//! ```text
//! L = mean(BCE(x, t)) + mean_b[1 - (2 Σ p t + ε) / (Σ p + Σ t + ε)],   ε = 1
//! ```
//!
//! BCE is averaged over every pixel of the batch; the Dice term is computed
//! per image and averaged over the batch.

use crate::error::{Error, Result};
use crate::model::SegmentationHeads;
use crate::tensor::{Real, Tensor};

pub const DICE_SMOOTH: f64 = 1.0;
pub const HEADS: usize = 5;

fn check_target<T: Real>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if logits.shape() != target.shape() || logits.rank() != 4 || logits.shape()[1] != 1 {
        return Err(Error::shape("bce_dice_loss", logits.shape(), target.shape()));
    }
    if let Some(v) = target.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::invalid("bce_dice_loss", format!("target value {v} is not binary")));
    }
    Ok(())
}

/// Dice term `1 - (2 Σ p t + ε) / (Σ p + Σ t + ε)` per image, `[B,1]`.
fn dice_term<T: Real>(prob: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    let b = prob.shape()[0];
    let flat = |t: &Tensor<T>| t.reshape(&[b, t.numel() / b]);
    let (p, t) = (flat(prob)?, flat(target)?);
    let inter = p.mul(&t)?.sum_axis(1)?;
    let denom = p.sum_axis(1)?.add(&t.sum_axis(1)?)?.add_scalar(DICE_SMOOTH);
    let ratio = inter.scale(2.0).add_scalar(DICE_SMOOTH).div(&denom)?;
    Ok(ratio.neg().add_scalar(1.0))
}

/// Scalar loss for one `[B,1,H,W]` logit map.
pub fn bce_dice_loss<T: Real>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    check_target(logits, target)?;
    let bce = logits.bce_with_logits(target)?.mean();
    let dice = dice_term(&logits.sigmoid(), target)?.mean();
    bce.add(&dice)
}

/// `Σ w_m * bce_dice_loss(m, target)` over `[P1, P2, P3, P4, P̂]`. Heads with
/// zero weight are skipped.
pub fn total_loss<T: Real>(heads: &SegmentationHeads<T>, target: &Tensor<T>, weights: &[f64; HEADS]) -> Result<Tensor<T>> {
    let mut total: Option<Tensor<T>> = None;
    for (map, &w) in heads.maps().into_iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let term = bce_dice_loss(map, target)?.scale(w);
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    Ok(total.unwrap_or_else(|| Tensor::scalar(T::zero())))
}
