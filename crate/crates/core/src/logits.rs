//! Per-pixel KL divergence between student and teacher output
//! distributions.
//!
//! Both logit tensors go through a per-pixel softmax over the class channel;
//! the loss is the mean KL over all `batch * h * w` pixels with the student
//! distribution as the first argument. Gradients flow to the student only —
//! the teacher distribution is stored as a constant.

use crate::autograd::softmax_channels_fwd;
use crate::error::{Error, Result};
use crate::tensor::Tensor4;
use ndarray::{Array4, ArrayView4};

/// Student and teacher logits of identical shape. The teacher side is
/// treated as gradient-detached everywhere.
#[derive(Debug, Clone)]
pub struct LogitsPair {
    pub student_logits: Tensor4,
    pub teacher_logits: Tensor4,
}

impl LogitsPair {
    pub fn new(student_logits: Tensor4, teacher_logits: Tensor4) -> Result<Self> {
        if student_logits.shape() != teacher_logits.shape() {
            return Err(Error::ShapeMismatch(format!(
                "LogitsPair: student {:?} vs teacher {:?}",
                student_logits.shape(),
                teacher_logits.shape()
            )));
        }
        Ok(LogitsPair {
            student_logits,
            teacher_logits,
        })
    }
}

/// Loss context: the teacher's (already softmaxed) distribution plus knobs.
#[derive(Debug, Clone)]
pub struct LogitsCtx {
    pub teacher_probs: Array4<f64>,
    pub epsilon: f64,
    /// Classical teacher-first KL direction instead of the student-first
    /// default.
    pub reverse: bool,
    pub temperature: f64,
}

impl LogitsCtx {
    /// Build the context from raw teacher logits.
    pub fn from_teacher_logits(
        teacher_logits: &ArrayView4<f64>,
        epsilon: f64,
        reverse: bool,
        temperature: f64,
    ) -> Self {
        let scaled = teacher_logits.mapv(|v| v / temperature);
        LogitsCtx {
            teacher_probs: softmax_channels_fwd(&scaled.view()),
            epsilon,
            reverse,
            temperature,
        }
    }
}

pub(crate) fn logits_forward(student_logits: &ArrayView4<f64>, ctx: &LogitsCtx) -> f64 {
    let scaled = student_logits.mapv(|v| v / ctx.temperature);
    let p = softmax_channels_fwd(&scaled.view());
    let q = &ctx.teacher_probs;
    let (n, c, h, w) = p.dim();
    let eps = ctx.epsilon;
    let mut total = 0.0;
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let ps = p[[b, ch, y, x]];
                    let pt = q[[b, ch, y, x]];
                    total += if ctx.reverse {
                        pt * ((pt + eps) / (ps + eps)).ln()
                    } else {
                        ps * ((ps + eps) / (pt + eps)).ln()
                    };
                }
            }
        }
    }
    total / (n * h * w) as f64
}

/// Gradient w.r.t. the student logits of `upstream * loss`.
pub(crate) fn logits_backward(
    student_logits: &ArrayView4<f64>,
    ctx: &LogitsCtx,
    upstream: f64,
) -> Array4<f64> {
    let scaled = student_logits.mapv(|v| v / ctx.temperature);
    let p = softmax_channels_fwd(&scaled.view());
    let q = &ctx.teacher_probs;
    let (n, c, h, w) = p.dim();
    let eps = ctx.epsilon;
    let norm = upstream / (n * h * w) as f64;
    let mut grad = Array4::<f64>::zeros((n, c, h, w));
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                // dL/dp per channel, then chain through the softmax
                let mut dldp = vec![0.0; c];
                for ch in 0..c {
                    let ps = p[[b, ch, y, x]];
                    let pt = q[[b, ch, y, x]];
                    dldp[ch] = if ctx.reverse {
                        -pt / (ps + eps)
                    } else {
                        ((ps + eps) / (pt + eps)).ln() + ps / (ps + eps)
                    } * norm;
                }
                let mut dot = 0.0;
                for ch in 0..c {
                    dot += dldp[ch] * p[[b, ch, y, x]];
                }
                for ch in 0..c {
                    grad[[b, ch, y, x]] =
                        p[[b, ch, y, x]] * (dldp[ch] - dot) / ctx.temperature;
                }
            }
        }
    }
    grad
}

/// Validated, no-grad form of the logits loss.
pub fn logits_loss(pair: &LogitsPair, epsilon: f64, reverse: bool, temperature: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidConfig("epsilon: must be > 0".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidConfig("logits.temperature: must be > 0".into()));
    }
    let ctx = LogitsCtx::from_teacher_logits(
        &pair.teacher_logits.array().view(),
        epsilon,
        reverse,
        temperature,
    );
    Ok(logits_forward(&pair.student_logits.array().view(), &ctx))
}
