//! Training objective: weighted soft Dice plus FDMDS reconstruction.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::real::Real;

/// Per-region Dice weights in (ET, TC, WT) order and the epoch from which
/// they apply; before that epoch all weights are 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w_et: f64,
    pub w_tc: f64,
    pub w_wt: f64,
    pub activation_epoch: usize,
}

impl ClassWeights {
    pub const UNIFORM: [f64; 3] = [1.0; 3];

    /// `(2, 1, 1)` switched on at `ceil(epochs / 2)`.
    pub fn et_emphasis(epochs: usize) -> Self {
        ClassWeights {
            w_et: 2.0,
            w_tc: 1.0,
            w_wt: 1.0,
            activation_epoch: epochs.div_ceil(2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.w_et, self.w_tc, self.w_wt]
            .iter()
            .any(|w| !(w.is_finite() && *w > 0.0))
        {
            return Err(Error::Parameter(format!(
                "class weights must be positive, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Weights in force during zero-based `epoch`.
    pub fn at_epoch(&self, epoch: usize) -> [f64; 3] {
        if epoch >= self.activation_epoch {
            [self.w_et, self.w_tc, self.w_wt]
        } else {
            Self::UNIFORM
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecNorm {
    #[default]
    Mse,
    L1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLossConfig {
    pub lambda_rec: f64,
    pub dice_smooth_eps: f64,
    pub rec_norm: RecNorm,
}

impl Default for JointLossConfig {
    fn default() -> Self {
        JointLossConfig {
            lambda_rec: 0.1,
            dice_smooth_eps: 1e-5,
            rec_norm: RecNorm::Mse,
        }
    }
}

impl JointLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_rec.is_finite() && self.lambda_rec >= 0.0) {
            return Err(Error::Parameter(format!(
                "lambda_rec must be >= 0, got {}",
                self.lambda_rec
            )));
        }
        if !(self.dice_smooth_eps.is_finite() && self.dice_smooth_eps >= 0.0) {
            return Err(Error::Parameter(format!(
                "dice eps must be >= 0, got {}",
                self.dice_smooth_eps
            )));
        }
        Ok(())
    }
}

/// `(2 sum(p g) + eps) / (sum(p) + sum(g) + eps)` on plain slices.
pub fn soft_dice(p: &[f64], g: &[f64], eps: f64) -> Result<f64> {
    if p.len() != g.len() {
        return Err(Error::shape(format!(
            "soft dice: {} vs {} voxels",
            p.len(),
            g.len()
        )));
    }
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (a, b) in p.iter().zip(g) {
        inter += a * b;
        sp += a;
        sg += b;
    }
    Ok((2.0 * inter + eps) / (sp + sg + eps))
}

/// Soft Dice of every `(sample, channel)` row of `P: [B, C, ...]` against
/// the constant target `G`, as a `[B, C]` node.
pub fn soft_dice_rows<T: Real>(g: &Graph<T>, p: Var, target: &Tensor<T>, eps: f64) -> Result<Var> {
    let shape = g.shape(p);
    if shape != target.shape() {
        return Err(Error::shape(format!(
            "soft dice: prediction {shape:?} vs target {:?}",
            target.shape()
        )));
    }
    if shape.len() < 2 {
        return Err(Error::shape(format!(
            "soft dice needs [B, C, ...], got {shape:?}"
        )));
    }
    let (b, c) = (shape[0], shape[1]);
    let n: usize = shape[2..].iter().product();
    let rows = b * c;
    let ones = g.constant(Tensor::full(&[n, 1], T::one()));
    let gt = g.constant(target.clone());
    let pg = g.reshape(g.mul(p, gt)?, &[rows, n])?;
    let inter = g.matmul(pg, ones)?;
    let sp = g.matmul(g.reshape(p, &[rows, n])?, ones)?;
    let sg: Vec<T> = target
        .data()
        .chunks(n.max(1))
        .map(|r| r.iter().copied().sum())
        .collect();
    let sg = g.constant(Tensor::new(&[rows, 1], sg)?);
    let num = g.add_scalar(g.scale(inter, T::of(2.0)), T::of(eps));
    let den = g.add_scalar(g.add(sp, sg)?, T::of(eps));
    g.reshape(g.div(num, den)?, &[b, c])
}

/// `1 - sum_c w_c Dice_c / sum_c w_c` with `Dice_c` averaged over the batch.
pub fn weighted_dice_loss<T: Real>(
    g: &Graph<T>,
    p: Var,
    target: &Tensor<T>,
    weights: [f64; 3],
    eps: f64,
) -> Result<Var> {
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::Parameter(format!(
            "class weights must be positive, got {weights:?}"
        )));
    }
    let shape = g.shape(p);
    if shape.get(1) != Some(&3) {
        return Err(Error::shape(format!(
            "weighted dice expects [B, 3, ...], got {shape:?}"
        )));
    }
    let dice = soft_dice_rows(g, p, target, eps)?;
    let b = shape[0];
    let batch_mean = g.constant(Tensor::full(&[1, b], T::of(1.0 / b as f64)));
    let per_class = g.matmul(batch_mean, dice)?;
    let total: f64 = weights.iter().sum();
    let w = g.constant(Tensor::new(
        &[3, 1],
        weights.iter().map(|&x| T::of(x / total)).collect(),
    )?);
    let weighted = g.reshape(g.matmul(per_class, w)?, &[])?;
    Ok(g.add_scalar(g.scale(weighted, -T::one()), T::one()))
}

/// Mean squared (or absolute) difference between the FDMDS output and the
/// clear reference.
pub fn recon_loss<T: Real>(g: &Graph<T>, v: Var, clear: &Tensor<T>, norm: RecNorm) -> Result<Var> {
    if g.shape(v) != clear.shape() {
        return Err(Error::shape(format!(
            "recon loss: {:?} vs {:?}",
            g.shape(v),
            clear.shape()
        )));
    }
    let diff = g.sub(v, g.constant(clear.clone()))?;
    Ok(match norm {
        RecNorm::Mse => g.mean(g.mul(diff, diff)?),
        RecNorm::L1 => g.mean(g.abs(diff)),
    })
}

/// `L_seg + lambda * L_rec`; without a reconstruction term, or with
/// `lambda = 0`, the segmentation loss node itself is returned.
pub fn joint_loss<T: Real>(
    g: &Graph<T>,
    seg: Var,
    rec: Option<Var>,
    lambda_rec: f64,
) -> Result<Var> {
    match rec {
        Some(r) if lambda_rec != 0.0 => g.add(seg, g.scale(r, T::of(lambda_rec))),
        _ => Ok(seg),
    }
}
