//! Soft IoU, Dice, and focal losses over probability masks, and the
//! decoder-alignment objective `20·IoU + Dice + Focal`.
//!
//! Every loss is built on an autodiff [`Tape`] so the same code yields both
//! the value and, through [`Tape::backward`], its gradient with respect to
//! the predicted mask.
//!
//! Bounds: IoU and Dice lie in `[0, 1]`. The focal term is at most
//! `α_f · ln(1/FOCAL_CLIP) ≈ 0.25 · 16.12 ≈ 4.03` per pixel because
//! probabilities are clipped to `[FOCAL_CLIP, 1 − FOCAL_CLIP]`; for masks
//! that are not confidently wrong it stays below 1.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SMOOTH: f64 = 1e-6;
pub const FOCAL_CLIP: f64 = 1e-7;
pub const FINE_TUNE_IOU_WEIGHT: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            gamma: 2.0,
            alpha: 0.25,
        }
    }
}

/// A predicted probability mask and its binary target.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair<T> {
    predicted: Tensor<T>,
    target: Tensor<T>,
}

impl<T: Scalar> MaskPair<T> {
    pub fn new(predicted: Tensor<T>, target: Tensor<T>) -> Result<Self> {
        if predicted.shape() != target.shape() {
            return Err(Error::dim("MaskPair", predicted.shape(), target.shape()));
        }
        if let Some(p) = predicted.data().iter().find(|p| !(**p >= T::zero() && **p <= T::one())) {
            return Err(Error::Contract(format!("predicted value {p} outside [0, 1]")));
        }
        if let Some(t) = target.data().iter().find(|t| **t != T::zero() && **t != T::one()) {
            return Err(Error::Contract(format!("target value {t} is not binary")));
        }
        Ok(MaskPair { predicted, target })
    }

    pub fn predicted(&self) -> &Tensor<T> {
        &self.predicted
    }

    pub fn target(&self) -> &Tensor<T> {
        &self.target
    }
}

/// The four loss values for one mask pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport<T> {
    pub iou: T,
    pub dice: T,
    pub focal: T,
    pub fine_tune: T,
}

fn c<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}

fn overlap_sums<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<(Var, Var, Var)> {
    let prod = tape.mul(pred, target)?;
    let inter = tape.sum(prod);
    let sum_p = tape.sum(pred);
    let sum_t = tape.sum(target);
    Ok((inter, sum_p, sum_t))
}

/// `1 − (Σpt + ε) / (Σp + Σt − Σpt + ε)`.
pub fn iou_on_tape<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let (inter, sum_p, sum_t) = overlap_sums(tape, pred, target)?;
    let num = tape.add_scalar(inter, c(SMOOTH));
    let union = tape.add(sum_p, sum_t)?;
    let union = tape.sub(union, inter)?;
    let den = tape.add_scalar(union, c(SMOOTH));
    let ratio = tape.div(num, den)?;
    let neg = tape.scale(ratio, -T::one());
    Ok(tape.add_scalar(neg, T::one()))
}

/// `1 − (2Σpt + ε) / (Σp + Σt + ε)`.
pub fn dice_on_tape<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let (inter, sum_p, sum_t) = overlap_sums(tape, pred, target)?;
    let twice = tape.scale(inter, c(2.0));
    let num = tape.add_scalar(twice, c(SMOOTH));
    let total = tape.add(sum_p, sum_t)?;
    let den = tape.add_scalar(total, c(SMOOTH));
    let ratio = tape.div(num, den)?;
    let neg = tape.scale(ratio, -T::one());
    Ok(tape.add_scalar(neg, T::one()))
}

/// Mean of `−α (1 − p_t)^γ ln p_t` with `p_t = p` on foreground pixels and
/// `1 − p` on background.
pub fn focal_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    target: Var,
    params: FocalParams,
) -> Result<Var> {
    let p = tape.clamp(pred, c(FOCAL_CLIP), c(1.0 - FOCAL_CLIP));
    // p_t = (2t − 1) ⊙ p + (1 − t)
    let target_v = tape.value(target).clone();
    let sign = tape.leaf(target_v.map(|t| c::<T>(2.0) * t - T::one()));
    let shift = tape.leaf(target_v.map(|t| T::one() - t));
    let signed = tape.mul(sign, p)?;
    let pt = tape.add(signed, shift)?;
    let log_pt = tape.ln(pt);
    let loss_per_pixel = if params.gamma == 0.0 {
        log_pt
    } else {
        let neg_pt = tape.scale(pt, -T::one());
        let miss = tape.add_scalar(neg_pt, T::one());
        let modulator = tape.powf(miss, c(params.gamma));
        tape.mul(modulator, log_pt)?
    };
    let mean = tape.mean(loss_per_pixel);
    Ok(tape.scale(mean, c(-params.alpha)))
}

pub fn fine_tune_on_tape<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let iou = iou_on_tape(tape, pred, target)?;
    let dice = dice_on_tape(tape, pred, target)?;
    let focal = focal_on_tape(tape, pred, target, FocalParams::default())?;
    let weighted = tape.scale(iou, c(FINE_TUNE_IOU_WEIGHT));
    let sum = tape.add(weighted, dice)?;
    tape.add(sum, focal)
}

fn evaluate<T: Scalar>(
    pair: &MaskPair<T>,
    f: impl FnOnce(&mut Tape<T>, Var, Var) -> Result<Var>,
) -> Result<T> {
    let mut tape = Tape::new();
    let p = tape.leaf(pair.predicted.clone());
    let t = tape.leaf(pair.target.clone());
    let loss = f(&mut tape, p, t)?;
    tape.value(loss).item()
}

pub fn iou_loss<T: Scalar>(pair: &MaskPair<T>) -> Result<T> {
    evaluate(pair, iou_on_tape)
}

pub fn dice_loss<T: Scalar>(pair: &MaskPair<T>) -> Result<T> {
    evaluate(pair, dice_on_tape)
}

pub fn focal_loss<T: Scalar>(pair: &MaskPair<T>, params: FocalParams) -> Result<T> {
    evaluate(pair, |tape, p, t| focal_on_tape(tape, p, t, params))
}

pub fn fine_tune_loss<T: Scalar>(pair: &MaskPair<T>) -> Result<T> {
    evaluate(pair, fine_tune_on_tape)
}

/// `20·iou + dice + focal` from already computed components.
pub fn combine_fine_tune<T: Scalar>(iou: T, dice: T, focal: T) -> T {
    c::<T>(FINE_TUNE_IOU_WEIGHT) * iou + dice + focal
}

pub fn loss_report<T: Scalar>(pair: &MaskPair<T>) -> Result<LossReport<T>> {
    Ok(LossReport {
        iou: iou_loss(pair)?,
        dice: dice_loss(pair)?,
        focal: focal_loss(pair, FocalParams::default())?,
        fine_tune: fine_tune_loss(pair)?,
    })
}
