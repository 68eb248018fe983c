//! Classification and mask losses plus the detached matching cost.
//!
//! Class loss is cross-entropy on an already-softmaxed distribution (log
//! clamped at 1e-12). Mask losses operate on logits evaluated at K sampled
//! points shared between prediction and target: sigmoid focal loss (mean
//! over points) and dice loss with an epsilon of 1 in numerator and
//! denominator. `match_cost` computes the same quantities in plain f64 with
//! no autodiff graph involvement.

use crate::matching::CostMatrix;
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_mask: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_epsilon: f64,
    /// Number of sampled points per mask term.
    pub num_points: usize,
    /// Use every pixel instead of sampling (small-resolution debugging).
    pub exhaustive_points: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cls: 2.0,
            lambda_mask: 5.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            dice_epsilon: 1.0,
            num_points: 1024,
            exhaustive_points: false,
        }
    }
}

/// Flat pixel indices to evaluate mask losses at. Random mode draws K iid
/// uniform indices with replacement (K may exceed H*W); exhaustive mode
/// returns every pixel once.
pub fn sample_points(height: usize, width: usize, k: usize, exhaustive: bool, rng: &mut Rng) -> Vec<usize> {
    let n = height * width;
    assert!(n > 0, "sample_points: empty mask {height}x{width}");
    if exhaustive {
        (0..n).collect()
    } else {
        (0..k).map(|_| rng.below(n)).collect()
    }
}

/// Mean negative log-likelihood of target classes under per-row
/// distributions [R, C+1]. Probabilities are clamped at 1e-12 before log.
pub fn cross_entropy(class_dist: &Tensor, targets: &[usize]) -> Tensor {
    let rows = class_dist.shape()[0];
    let classes = class_dist.shape()[1];
    assert_eq!(rows, targets.len(), "cross_entropy: {rows} rows vs {} targets", targets.len());
    assert!(rows > 0, "cross_entropy: no rows");
    let idx: Vec<usize> = targets
        .iter()
        .enumerate()
        .map(|(r, &t)| {
            assert!(t < classes, "cross_entropy: target {t} out of range {classes}");
            r * classes + t
        })
        .collect();
    class_dist.take_flat(&idx).clamp_min(1e-12).ln().neg().mean(None)
}

/// Sigmoid focal loss over point-sampled logits [M, K] against 0/1 targets
/// of the same shape; mean over all entries. Alpha weights the foreground,
/// 1-alpha the background; gamma = 0 reduces to alpha-weighted BCE.
pub fn focal_loss(mask_logits: &Tensor, targets: &Tensor, gamma: f64, alpha: f64) -> Tensor {
    assert_eq!(
        mask_logits.shape(),
        targets.shape(),
        "focal_loss: shape mismatch {:?} vs {:?}",
        mask_logits.shape(),
        targets.shape()
    );
    let p = mask_logits.sigmoid();
    let pt = p.mul(targets).add(&p.rsub_scalar(1.0).mul(&targets.rsub_scalar(1.0)));
    let at = targets.affine(2.0 * alpha - 1.0, 1.0 - alpha);
    at.mul(&pt.rsub_scalar(1.0).pow_scalar(gamma))
        .mul(&pt.clamp_min(1e-12).ln().neg())
        .mean(None)
}

/// Dice loss over point-sampled logits [M, K]: per row
/// 1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps), mean over rows.
pub fn dice_loss(mask_logits: &Tensor, targets: &Tensor, eps: f64) -> Tensor {
    assert_eq!(
        mask_logits.shape(),
        targets.shape(),
        "dice_loss: shape mismatch {:?} vs {:?}",
        mask_logits.shape(),
        targets.shape()
    );
    let p = mask_logits.sigmoid();
    let num = p.mul(targets).sum(Some(1)).affine(2.0, eps);
    let den = p.sum(Some(1)).add(&targets.sum(Some(1))).add_scalar(eps);
    num.div(&den).rsub_scalar(1.0).mean(None)
}

/// Focal + dice for matched mask rows.
pub fn mask_loss(mask_logits: &Tensor, targets: &Tensor, w: &LossWeights) -> Tensor {
    focal_loss(mask_logits, targets, w.focal_gamma, w.focal_alpha)
        .add(&dice_loss(mask_logits, targets, w.dice_epsilon))
}

/// Total two-frame objective:
/// lambda_cls * (cls0 + cls_track + cls1) + lambda_mask * (mask0 + mask_track + mask1).
pub fn combined_loss(
    cls0: &Tensor,
    cls_track: &Tensor,
    cls1: &Tensor,
    mask0: &Tensor,
    mask_track: &Tensor,
    mask1: &Tensor,
    w: &LossWeights,
) -> Tensor {
    let cls = cls0.add(cls_track).add(cls1);
    let mask = mask0.add(mask_track).add(mask1);
    cls.mul_scalar(w.lambda_cls).add(&mask.mul_scalar(w.lambda_mask))
}

/// Ground-truth instance view for cost computation: category index plus the
/// 0/1 mask values at the shared sampled points.
pub struct GtAtPoints {
    pub category: usize,
    pub bits: Vec<f64>,
}

fn focal_scalar(logits: &[f64], bits: &[f64], gamma: f64, alpha: f64) -> f64 {
    let mut acc = 0.0;
    for (&l, &t) in logits.iter().zip(bits) {
        let p = if l >= 0.0 { 1.0 / (1.0 + (-l).exp()) } else { l.exp() / (1.0 + l.exp()) };
        let pt = p * t + (1.0 - p) * (1.0 - t);
        let at = alpha * t + (1.0 - alpha) * (1.0 - t);
        acc += at * (1.0 - pt).powf(gamma) * -(pt.max(1e-12).ln());
    }
    acc / logits.len() as f64
}

fn dice_scalar(logits: &[f64], bits: &[f64], eps: f64) -> f64 {
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut tsum = 0.0;
    for (&l, &t) in logits.iter().zip(bits) {
        let p = if l >= 0.0 { 1.0 / (1.0 + (-l).exp()) } else { l.exp() / (1.0 + l.exp()) };
        inter += p * t;
        psum += p;
        tsum += t;
    }
    1.0 - (2.0 * inter + eps) / (psum + tsum + eps)
}

/// P x G matching cost in plain f64: per cell
/// lambda_cls * CE(dist_p, cat_g) + lambda_mask * (focal + dice) at the
/// shared sampled points. Records no autodiff graph nodes.
pub fn match_cost(
    class_dist: &[Vec<f64>],
    mask_logits_at_points: &[Vec<f64>],
    gts: &[GtAtPoints],
    w: &LossWeights,
) -> CostMatrix {
    let p = class_dist.len();
    assert_eq!(
        p,
        mask_logits_at_points.len(),
        "match_cost: {p} class rows vs {} mask rows",
        mask_logits_at_points.len()
    );
    let mut data = Vec::with_capacity(p * gts.len());
    for (dist, logits) in class_dist.iter().zip(mask_logits_at_points) {
        for gt in gts {
            assert_eq!(
                logits.len(),
                gt.bits.len(),
                "match_cost: {} sampled logits vs {} target bits",
                logits.len(),
                gt.bits.len()
            );
            let ce = -(dist[gt.category].max(1e-12).ln());
            let focal = focal_scalar(logits, &gt.bits, w.focal_gamma, w.focal_alpha);
            let dice = dice_scalar(logits, &gt.bits, w.dice_epsilon);
            data.push(w.lambda_cls * ce + w.lambda_mask * (focal + dice));
        }
    }
    CostMatrix::new(p, gts.len(), data)
}
