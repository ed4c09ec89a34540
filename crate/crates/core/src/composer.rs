//! Supervised segmentation losses, the dice evaluation metric, and the
//! weighted total objective that composes all loss terms.

use crate::config::{LossWeights, ModuleFlags, SegLossKind};
use crate::error::{Error, Result};
use crate::tensor::{LabelMap, ProbMap};
use ndarray::{Array3, Array4, ArrayView4};

/// Context for the soft-dice loss node.
#[derive(Debug, Clone)]
pub struct DiceCtx {
    pub labels: Array3<u32>,
    pub smooth: f64,
}

/// Context for the focal loss node.
#[derive(Debug, Clone)]
pub struct FocalCtx {
    pub labels: Array3<u32>,
    pub gamma: f64,
    pub epsilon: f64,
}

/// Soft dice over foreground classes (channel 0 is background):
/// `1 - mean_c (2*sum(p*g) + smooth) / (sum(p) + sum(g) + smooth)`.
pub(crate) fn dice_forward(probs: &ArrayView4<f64>, ctx: &DiceCtx) -> f64 {
    let (n, c, h, w) = probs.dim();
    let mut dice_sum = 0.0;
    for ch in 1..c {
        let mut inter = 0.0;
        let mut psum = 0.0;
        let mut gsum = 0.0;
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let p = probs[[b, ch, y, x]];
                    let g = (ctx.labels[[b, y, x]] == ch as u32) as u8 as f64;
                    inter += p * g;
                    psum += p;
                    gsum += g;
                }
            }
        }
        dice_sum += (2.0 * inter + ctx.smooth) / (psum + gsum + ctx.smooth);
    }
    1.0 - dice_sum / (c - 1) as f64
}

pub(crate) fn dice_backward(
    probs: &ArrayView4<f64>,
    ctx: &DiceCtx,
    upstream: f64,
) -> Array4<f64> {
    let (n, c, h, w) = probs.dim();
    let mut grad = Array4::<f64>::zeros((n, c, h, w));
    let fg = (c - 1) as f64;
    for ch in 1..c {
        let mut inter = 0.0;
        let mut psum = 0.0;
        let mut gsum = 0.0;
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let p = probs[[b, ch, y, x]];
                    let g = (ctx.labels[[b, y, x]] == ch as u32) as u8 as f64;
                    inter += p * g;
                    psum += p;
                    gsum += g;
                }
            }
        }
        let num = 2.0 * inter + ctx.smooth;
        let den = psum + gsum + ctx.smooth;
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let g = (ctx.labels[[b, y, x]] == ch as u32) as u8 as f64;
                    // d/dp of -(num/den)/fg
                    grad[[b, ch, y, x]] =
                        -upstream * (2.0 * g * den - num) / (den * den) / fg;
                }
            }
        }
    }
    grad
}

/// Focal loss `mean_px -(1 - p_t)^gamma * ln(p_t + eps)`; `gamma = 0`
/// reduces exactly to mean cross-entropy.
pub(crate) fn focal_forward(probs: &ArrayView4<f64>, ctx: &FocalCtx) -> f64 {
    let (n, _c, h, w) = probs.dim();
    let mut total = 0.0;
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let t = ctx.labels[[b, y, x]] as usize;
                let pt = probs[[b, t, y, x]];
                let u = (1.0 - pt).max(0.0);
                total -= u.powf(ctx.gamma) * (pt + ctx.epsilon).ln();
            }
        }
    }
    total / (n * h * w) as f64
}

pub(crate) fn focal_backward(
    probs: &ArrayView4<f64>,
    ctx: &FocalCtx,
    upstream: f64,
) -> Array4<f64> {
    let (n, c, h, w) = probs.dim();
    let norm = upstream / (n * h * w) as f64;
    let mut grad = Array4::<f64>::zeros((n, c, h, w));
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let t = ctx.labels[[b, y, x]] as usize;
                let pt = probs[[b, t, y, x]];
                let u = (1.0 - pt).max(0.0);
                let d = if ctx.gamma == 0.0 {
                    -1.0 / (pt + ctx.epsilon)
                } else if u > 0.0 {
                    ctx.gamma * u.powf(ctx.gamma - 1.0) * (pt + ctx.epsilon).ln()
                        - u.powf(ctx.gamma) / (pt + ctx.epsilon)
                } else {
                    0.0
                };
                grad[[b, t, y, x]] = norm * d;
            }
        }
    }
    grad
}

fn check_seg_inputs(probs: &ProbMap, gt: &LabelMap) -> Result<()> {
    let (n, c, h, w) = probs.shape();
    let (gn, gh, gw) = gt.shape();
    if (n, h, w) != (gn, gh, gw) {
        return Err(Error::ShapeMismatch(format!(
            "segmentation loss: probs ({n}, {c}, {h}, {w}) vs labels ({gn}, {gh}, {gw})"
        )));
    }
    if c < 2 {
        return Err(Error::ShapeMismatch(
            "segmentation loss: need >= 2 class channels (channel 0 is background)".into(),
        ));
    }
    if gt.num_classes() as usize > c {
        return Err(Error::ShapeMismatch(format!(
            "segmentation loss: {} label classes exceed {c} channels",
            gt.num_classes()
        )));
    }
    Ok(())
}

/// Validated soft-dice loss in `[0, 1]`.
pub fn dice_loss(probs: &ProbMap, gt: &LabelMap, smooth: f64) -> Result<f64> {
    check_seg_inputs(probs, gt)?;
    if !(smooth > 0.0) {
        return Err(Error::InvalidConfig("seg.smooth: must be > 0".into()));
    }
    let ctx = DiceCtx {
        labels: gt.array().clone(),
        smooth,
    };
    Ok(dice_forward(&probs.array().view(), &ctx))
}

/// Validated focal loss (>= 0).
pub fn focal_loss(probs: &ProbMap, gt: &LabelMap, gamma: f64) -> Result<f64> {
    check_seg_inputs(probs, gt)?;
    if gamma < 0.0 {
        return Err(Error::InvalidConfig("seg.gamma: must be >= 0".into()));
    }
    let ctx = FocalCtx {
        labels: gt.array().clone(),
        gamma,
        epsilon: 1e-8,
    };
    Ok(focal_forward(&probs.array().view(), &ctx))
}

/// Supervised segmentation loss selected by config; `DiceFocal` sums both.
pub fn seg_loss(
    probs: &ProbMap,
    gt: &LabelMap,
    kind: SegLossKind,
    gamma: f64,
    smooth: f64,
) -> Result<f64> {
    Ok(match kind {
        SegLossKind::Dice => dice_loss(probs, gt, smooth)?,
        SegLossKind::Focal => focal_loss(probs, gt, gamma)?,
        SegLossKind::DiceFocal => dice_loss(probs, gt, smooth)? + focal_loss(probs, gt, gamma)?,
    })
}

/// One logged step of the total objective, with the weighted composition
/// kept alongside its parts.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub seg: f64,
    pub logits: f64,
    pub kernel: f64,
    pub affinity: f64,
    pub total: f64,
}

/// Weighted total: `seg + l1*logits + l2*kernel + l3*affinity`. Disabled
/// modules contribute exactly 0. Any non-finite component aborts with the
/// component's name so training divergence is caught at the step it happens.
pub fn total_loss(
    seg: f64,
    logits: f64,
    kernel: f64,
    affinity: f64,
    weights: &LossWeights,
    flags: &ModuleFlags,
) -> Result<LossBreakdown> {
    let logits = if flags.use_lm { logits } else { 0.0 };
    let kernel = if flags.use_kmm { kernel } else { 0.0 };
    let affinity = if flags.use_aam { affinity } else { 0.0 };
    for (name, v) in [
        ("seg", seg),
        ("logits", logits),
        ("kernel", kernel),
        ("affinity", affinity),
    ] {
        if !v.is_finite() {
            return Err(Error::NumericAbort {
                component: name.to_string(),
                epoch: 0,
                step: 0,
            });
        }
    }
    let total = seg
        + weights.lambda1 * logits
        + weights.lambda2 * kernel
        + weights.lambda3 * affinity;
    Ok(LossBreakdown {
        seg,
        logits,
        kernel,
        affinity,
        total,
    })
}

/// Hard-label dice on the foreground class: `2|A∩B| / (|A| + |B|)`, with
/// the both-empty convention of 1.0.
pub fn dice_score(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch(format!(
            "dice_score: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (&pv, &gv) in pred.array().iter().zip(gt.array().iter()) {
        let pf = pv != 0;
        let gf = gv != 0;
        a += pf as usize;
        b += gf as usize;
        inter += (pf && gf) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}
