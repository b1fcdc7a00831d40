//! Dice-type objectives with analytic gradients with respect to the
//! predicted probabilities.
//!
//! Overlap sums run over every batch item and voxel of a class, so a batch
//! is scored as one volume.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Dims, Tensor};
use crate::scalar::Scalar;
use crate::volume::resample_nearest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassWeighting {
    Uniform,
    Generalized,
}

/// Whether the dice denominator sums squares (`sum p^2 + sum g^2`) or
/// plain values (`sum p + sum g`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DiceDenominator {
    #[default]
    Squared,
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub smooth_eps: f64,
    pub pathway_weights: [f64; 3],
    pub class_weighting: ClassWeighting,
    #[serde(default)]
    pub denominator: DiceDenominator,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            smooth_eps: 1e-5,
            pathway_weights: [1.0; 3],
            class_weighting: ClassWeighting::Uniform,
            denominator: DiceDenominator::Squared,
        }
    }
}

impl LossConfig {
    pub fn generalized() -> Self {
        Self {
            class_weighting: ClassWeighting::Generalized,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_eps(self.smooth_eps)?;
        let w = self.pathway_weights;
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidArgument(format!("pathway weights must be non-negative with one positive, got {w:?}")));
        }
        Ok(())
    }
}

/// Loss value and its gradient with respect to the probabilities.
#[derive(Debug, Clone)]
pub struct LossGrad<T> {
    pub value: f64,
    pub grad: Tensor<T>,
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("smoothing eps must be positive, got {eps}")))
    }
}

fn check_pair<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if probs.dims() != target.dims() {
        return Err(Error::ShapeMismatch(format!("probabilities {} vs target {}", probs.dims(), target.dims())));
    }
    Ok(())
}

/// Per-class sums `(sum p*g, sum d(p), sum d(g))` where `d` is the
/// denominator transform.
fn class_sums<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>, denom: DiceDenominator) -> Vec<[f64; 3]> {
    let d = probs.dims();
    let sq = denom == DiceDenominator::Squared;
    (0..d.c)
        .map(|c| {
            let mut s = [0.0; 3];
            for n in 0..d.n {
                for (&p, &g) in probs.channel(n, c).iter().zip(target.channel(n, c)) {
                    let (p, g) = (p.as_f64(), g.as_f64());
                    s[0] += p * g;
                    s[1] += if sq { p * p } else { p };
                    s[2] += if sq { g * g } else { g };
                }
            }
            s
        })
        .collect()
}

/// Fills the gradient tensor: class `c` gets `a[c] * g + b[c] * d'(p)`.
fn assemble<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>, denom: DiceDenominator, a: &[f64], b: &[f64]) -> Tensor<T> {
    let d = probs.dims();
    let mut grad = Tensor::zeros(d);
    for n in 0..d.n {
        for c in 0..d.c {
            let (ac, bc) = (T::lit(a[c]), T::lit(b[c]));
            let out = grad.channel_mut(n, c);
            for ((o, &p), &g) in out.iter_mut().zip(probs.channel(n, c)).zip(target.channel(n, c)) {
                let dp = match denom {
                    DiceDenominator::Squared => T::lit(2.0) * p,
                    DiceDenominator::Plain => T::one(),
                };
                *o = ac * g + bc * dp;
            }
        }
    }
    grad
}

/// `1 - mean_c (2 sum pg + eps) / (sum p^2 + sum g^2 + eps)`, with gradient.
pub fn soft_dice_loss_grad<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>, eps: f64, denom: DiceDenominator) -> Result<LossGrad<T>> {
    check_eps(eps)?;
    check_pair(probs, target)?;
    let sums = class_sums(probs, target, denom);
    let k = sums.len() as f64;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    let mut mean_dice = 0.0;
    for [i, p, g] in sums {
        let num = 2.0 * i + eps;
        let den = p + g + eps;
        mean_dice += num / den / k;
        // d(num/den) = (2 g den - num d'(p)) / den^2, negated and averaged
        a.push(-2.0 / (den * k));
        b.push(num / (den * den * k));
    }
    let grad = assemble(probs, target, denom, &a, &b);
    Ok(LossGrad { value: 1.0 - mean_dice, grad })
}

pub fn soft_dice_loss<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>, eps: f64) -> Result<f64> {
    Ok(soft_dice_loss_grad(probs, target, eps, DiceDenominator::Squared)?.value)
}

/// Raw class weights `1 / (sum g)^2`; classes absent from the target get 0.
pub fn generalized_weights<T: Scalar>(target: &Tensor<T>) -> Vec<f64> {
    let d = target.dims();
    (0..d.c)
        .map(|c| {
            let s: f64 = (0..d.n).flat_map(|n| target.channel(n, c)).map(|v| v.as_f64()).sum();
            if s > 0.0 {
                1.0 / (s * s)
            } else {
                0.0
            }
        })
        .collect()
}

/// `1 - (2 sum_l w_l I_l + eps) / (sum_l w_l (P_l + G_l) + eps)` with the
/// weights of [`generalized_weights`] normalised to sum to one, so `eps`
/// keeps the same scale as in the unweighted loss.
pub fn generalized_dice_loss_grad<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>, eps: f64, denom: DiceDenominator) -> Result<LossGrad<T>> {
    check_eps(eps)?;
    check_pair(probs, target)?;
    let raw = generalized_weights(target);
    let total: f64 = raw.iter().sum();
    if total == 0.0 {
        return Err(Error::Degenerate("generalized dice needs at least one class present in the target".into()));
    }
    let w: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let sums = class_sums(probs, target, denom);
    let num = 2.0 * sums.iter().zip(&w).map(|(s, w)| w * s[0]).sum::<f64>() + eps;
    let den = sums.iter().zip(&w).map(|(s, w)| w * (s[1] + s[2])).sum::<f64>() + eps;
    let a: Vec<f64> = w.iter().map(|w| -2.0 * w / den).collect();
    let b: Vec<f64> = w.iter().map(|w| w * num / (den * den)).collect();
    let grad = assemble(probs, target, denom, &a, &b);
    Ok(LossGrad { value: 1.0 - num / den, grad })
}

pub fn generalized_dice_loss<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>, eps: f64) -> Result<f64> {
    Ok(generalized_dice_loss_grad(probs, target, eps, DiceDenominator::Squared)?.value)
}

/// The dice variant selected by `cfg` on one probability map.
pub fn dice_loss_grad<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>, cfg: &LossConfig) -> Result<LossGrad<T>> {
    match cfg.class_weighting {
        ClassWeighting::Uniform => soft_dice_loss_grad(probs, target, cfg.smooth_eps, cfg.denominator),
        ClassWeighting::Generalized => generalized_dice_loss_grad(probs, target, cfg.smooth_eps, cfg.denominator),
    }
}

/// `sum_k w_k * dice(pathway_k)` with one gradient per pathway.
pub fn progressive_loss_grad<T: Scalar>(pathways: &[Tensor<T>], target: &Tensor<T>, cfg: &LossConfig) -> Result<(f64, Vec<Tensor<T>>)> {
    if pathways.len() != 3 {
        return Err(Error::InvalidArgument(format!("progressive loss needs 3 pathways, got {}", pathways.len())));
    }
    cfg.validate()?;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(3);
    for (p, &w) in pathways.iter().zip(&cfg.pathway_weights) {
        let lg = dice_loss_grad(p, target, cfg)?;
        total += w * lg.value;
        let wt = T::lit(w);
        grads.push(lg.grad.map(|g| g * wt));
    }
    Ok((total, grads))
}

pub fn progressive_loss<T: Scalar>(pathways: &[Tensor<T>], target: &Tensor<T>, cfg: &LossConfig) -> Result<f64> {
    Ok(progressive_loss_grad(pathways, target, cfg)?.0)
}

/// One-hot encoding of `labels` (one slice per batch item) on `spatial`.
pub fn one_hot<T: Scalar>(labels: &[&[u8]], spatial: [usize; 3], classes: usize) -> Result<Tensor<T>> {
    let dims = Dims::new(labels.len(), classes, spatial);
    let v = dims.voxels();
    let mut t = Tensor::zeros(dims);
    for (n, l) in labels.iter().enumerate() {
        if l.len() != v {
            return Err(Error::ShapeMismatch(format!("label map has {} voxels, expected {v}", l.len())));
        }
        let item = t.item_mut(n);
        for (i, &c) in l.iter().enumerate() {
            if c as usize >= classes {
                return Err(Error::InvalidLabel(c));
            }
            item[c as usize * v + i] = T::one();
        }
    }
    Ok(t)
}

/// Nearest-neighbour down-sampling of a label grid to pathway resolution.
pub fn downsample_target(labels: &[u8], shape: [usize; 3], out: [usize; 3]) -> Vec<u8> {
    if shape == out {
        labels.to_vec()
    } else {
        resample_nearest(labels, shape, out)
    }
}
