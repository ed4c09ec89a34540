//! Affinity loss over neighboring pixel pairs.
//!
//! Pairs are partitioned by the teacher's predicted label map: same-label
//! pairs (`P+`) have their class distributions pulled together, different-
//! label pairs (`P-`) are pushed apart up to a margin. The per-pair weight
//! is the KL divergence between the full class-probability vectors at the
//! two pixels, with the raster-earlier pixel as the first KL argument.

use crate::error::{Error, Result};
use crate::math::kl_div_unchecked;
use crate::tensor::{LabelMap, ProbMap};
use ndarray::{Array4, ArrayView4};
use std::sync::Arc;

/// A pixel coordinate inside a batch: (batch, y, x).
pub type PixelCoord = (usize, usize, usize);

/// Neighbor pairs within a Chebyshev radius, split by label agreement.
///
/// Every in-bounds unordered pair appears exactly once: pairs are generated
/// by raster scan with the second pixel strictly after the first, so the two
/// subsets are disjoint by construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelPairSet {
    pub plus_pairs: Vec<(PixelCoord, PixelCoord)>,
    pub minus_pairs: Vec<(PixelCoord, PixelCoord)>,
    pub radius: usize,
    pub image_shape: (usize, usize, usize),
}

/// Result of the affinity loss with its two components kept separate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffinityLossOutput {
    pub loss_plus: f64,
    pub loss_minus: f64,
    pub loss_total: f64,
    pub pair_counts: (usize, usize),
}

/// Enumerate all neighbor pairs within `radius` (Chebyshev) of each pixel
/// and route each to `plus_pairs` iff the two teacher labels agree.
pub fn build_pixel_pairs(teacher_labels: &LabelMap, radius: usize) -> Result<PixelPairSet> {
    let (n, h, w) = teacher_labels.shape();
    if radius == 0 {
        return Err(Error::InvalidConfig(
            "neighborhood_radius: must be >= 1".into(),
        ));
    }
    if radius >= h.min(w) {
        return Err(Error::InvalidConfig(format!(
            "neighborhood_radius: {radius} degenerate for a {h}x{w} map (must be < min(h, w))"
        )));
    }
    let labels = teacher_labels.array();
    let mut plus = Vec::new();
    let mut minus = Vec::new();
    let r = radius as isize;
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let li = labels[[b, y, x]];
                // neighbors strictly after (y, x) in raster order
                for dy in 0..=r {
                    let ny = y as isize + dy;
                    if ny >= h as isize {
                        break;
                    }
                    let dx_start = if dy == 0 { 1 } else { -r };
                    for dx in dx_start..=r {
                        let nx = x as isize + dx;
                        if nx < 0 || nx >= w as isize {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        let pair = ((b, y, x), (b, ny, nx));
                        if labels[[b, ny, nx]] == li {
                            plus.push(pair);
                        } else {
                            minus.push(pair);
                        }
                    }
                }
            }
        }
    }
    Ok(PixelPairSet {
        plus_pairs: plus,
        minus_pairs: minus,
        radius,
        image_shape: (n, h, w),
    })
}

/// Everything the loss needs besides the probability map itself.
#[derive(Debug, Clone)]
pub struct AffinityCtx {
    pub pairs: Arc<PixelPairSet>,
    pub margin: f64,
    pub epsilon: f64,
    pub per_class_kl: bool,
}

fn pixel_vec(p: &ArrayView4<f64>, c: usize, at: PixelCoord) -> Vec<f64> {
    (0..c).map(|ch| p[[at.0, ch, at.1, at.2]]).collect()
}

/// KL weight of one ordered pair.
fn pair_weight(p: &ArrayView4<f64>, ctx: &AffinityCtx, i: PixelCoord, j: PixelCoord) -> f64 {
    let c = p.dim().1;
    let eps = ctx.epsilon;
    if ctx.per_class_kl {
        // one Bernoulli KL per class channel, summed
        (0..c)
            .map(|ch| {
                let a = p[[i.0, ch, i.1, i.2]];
                let b = p[[j.0, ch, j.1, j.2]];
                a * ((a + eps) / (b + eps)).ln()
                    + (1.0 - a) * ((1.0 - a + eps) / (1.0 - b + eps)).ln()
            })
            .sum()
    } else {
        let pi = pixel_vec(p, c, i);
        let pj = pixel_vec(p, c, j);
        kl_div_unchecked(&pi, &pj, eps)
    }
}

/// Forward pass over raw probability values: returns (loss_plus, loss_minus).
/// An empty subset contributes exactly 0.
pub(crate) fn affinity_forward(probs: &ArrayView4<f64>, ctx: &AffinityCtx) -> (f64, f64) {
    let pairs = &ctx.pairs;
    let plus = if pairs.plus_pairs.is_empty() {
        0.0
    } else {
        let sum: f64 = pairs
            .plus_pairs
            .iter()
            .map(|&(i, j)| pair_weight(probs, ctx, i, j))
            .sum();
        sum / pairs.plus_pairs.len() as f64
    };
    let minus = if pairs.minus_pairs.is_empty() {
        0.0
    } else {
        let sum: f64 = pairs
            .minus_pairs
            .iter()
            .map(|&(i, j)| (ctx.margin - pair_weight(probs, ctx, i, j)).max(0.0))
            .sum();
        sum / pairs.minus_pairs.len() as f64
    };
    (plus, minus)
}

/// Accumulate d(pair weight)/d(probs) scaled by `coeff` into `grad`.
fn pair_weight_grad(
    p: &ArrayView4<f64>,
    ctx: &AffinityCtx,
    i: PixelCoord,
    j: PixelCoord,
    coeff: f64,
    grad: &mut Array4<f64>,
) {
    let c = p.dim().1;
    let eps = ctx.epsilon;
    for ch in 0..c {
        let a = p[[i.0, ch, i.1, i.2]];
        let b = p[[j.0, ch, j.1, j.2]];
        if ctx.per_class_kl {
            let da = ((a + eps) / (b + eps)).ln() + a / (a + eps)
                - ((1.0 - a + eps) / (1.0 - b + eps)).ln()
                - (1.0 - a) / (1.0 - a + eps);
            let db = -a / (b + eps) + (1.0 - a) / (1.0 - b + eps);
            grad[[i.0, ch, i.1, i.2]] += coeff * da;
            grad[[j.0, ch, j.1, j.2]] += coeff * db;
        } else {
            let da = ((a + eps) / (b + eps)).ln() + a / (a + eps);
            let db = -a / (b + eps);
            grad[[i.0, ch, i.1, i.2]] += coeff * da;
            grad[[j.0, ch, j.1, j.2]] += coeff * db;
        }
    }
}

/// Gradient of `upstream * (loss_plus + loss_minus)` w.r.t. the probability
/// map.
pub(crate) fn affinity_backward(
    probs: &ArrayView4<f64>,
    ctx: &AffinityCtx,
    upstream: f64,
) -> Array4<f64> {
    let mut grad = Array4::<f64>::zeros(probs.dim());
    let pairs = &ctx.pairs;
    if !pairs.plus_pairs.is_empty() {
        let coeff = upstream / pairs.plus_pairs.len() as f64;
        for &(i, j) in &pairs.plus_pairs {
            pair_weight_grad(probs, ctx, i, j, coeff, &mut grad);
        }
    }
    if !pairs.minus_pairs.is_empty() {
        let coeff = -upstream / pairs.minus_pairs.len() as f64;
        for &(i, j) in &pairs.minus_pairs {
            // hinge: gradient flows only while the margin is not met
            if ctx.margin - pair_weight(probs, ctx, i, j) > 0.0 {
                pair_weight_grad(probs, ctx, i, j, coeff, &mut grad);
            }
        }
    }
    grad
}

/// Validated affinity loss over a probability map.
///
/// The caller resizes the student's probability map to the label-map
/// resolution first; pair construction never sees gradients.
pub fn affinity_loss(
    student_probs: &ProbMap,
    pairs: &Arc<PixelPairSet>,
    margin: f64,
    epsilon: f64,
    per_class_kl: bool,
) -> Result<AffinityLossOutput> {
    let (n, _c, h, w) = student_probs.shape();
    if (n, h, w) != pairs.image_shape {
        return Err(Error::ShapeMismatch(format!(
            "affinity_loss: probs spatial shape ({n}, {h}, {w}) vs pair set {:?}",
            pairs.image_shape
        )));
    }
    if !(margin > 0.0) {
        return Err(Error::InvalidConfig("margin: must be > 0".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidConfig("epsilon: must be > 0".into()));
    }
    let ctx = AffinityCtx {
        pairs: Arc::clone(pairs),
        margin,
        epsilon,
        per_class_kl,
    };
    let (loss_plus, loss_minus) = affinity_forward(&student_probs.array().view(), &ctx);
    Ok(AffinityLossOutput {
        loss_plus,
        loss_minus,
        loss_total: loss_plus + loss_minus,
        pair_counts: (pairs.plus_pairs.len(), pairs.minus_pairs.len()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor4;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr3, Array3, Array4};
    use rand::Rng;

    fn labels(a: Array3<u32>, k: u32) -> LabelMap {
        LabelMap::new(a, k).unwrap()
    }

    fn probmap(a: Array4<f64>) -> ProbMap {
        ProbMap::new(Tensor4::new(a).unwrap()).unwrap()
    }

    /// Independent O(pixels^2) oracle: enumerate ALL ordered pixel pairs of
    /// each batch element, keep i-before-j raster pairs within the radius.
    fn brute_force_pairs(lm: &LabelMap, radius: usize) -> (Vec<(PixelCoord, PixelCoord)>, Vec<(PixelCoord, PixelCoord)>) {
        let (n, h, w) = lm.shape();
        let l = lm.array();
        let mut plus = Vec::new();
        let mut minus = Vec::new();
        for b in 0..n {
            for a_idx in 0..h * w {
                for b_idx in (a_idx + 1)..h * w {
                    let (iy, ix) = (a_idx / w, a_idx % w);
                    let (jy, jx) = (b_idx / w, b_idx % w);
                    let cheb = (iy as isize - jy as isize)
                        .abs()
                        .max((ix as isize - jx as isize).abs()) as usize;
                    if cheb >= 1 && cheb <= radius {
                        let pair = ((b, iy, ix), (b, jy, jx));
                        if l[[b, iy, ix]] == l[[b, jy, jx]] {
                            plus.push(pair);
                        } else {
                            minus.push(pair);
                        }
                    }
                }
            }
        }
        (plus, minus)
    }

    #[test]
    fn uniform_3x3_map_has_twenty_plus_pairs() {
        let lm = labels(Array3::zeros((1, 3, 3)), 2);
        let ps = build_pixel_pairs(&lm, 1).unwrap();
        assert_eq!(ps.plus_pairs.len(), 20);
        assert_eq!(ps.minus_pairs.len(), 0);
        // cross-check against the oracle
        let (bp, bm) = brute_force_pairs(&lm, 1);
        assert_eq!(bp.len(), 20);
        assert_eq!(bm.len(), 0);
    }

    #[test]
    fn adjacent_different_labels_make_one_minus_pair() {
        let lm = labels(arr3(&[[[0u32, 1]]]), 2);
        let ps = build_pixel_pairs(&lm, 1).unwrap();
        assert_eq!(ps.plus_pairs.len(), 0);
        assert_eq!(ps.minus_pairs.len(), 1);
    }

    #[test]
    fn checkerboard_2x2_splits_pairs() {
        let lm = labels(arr3(&[[[0u32, 1], [1, 0]]]), 2);
        let ps = build_pixel_pairs(&lm, 1).unwrap();
        assert_eq!(ps.plus_pairs.len(), 2, "the two diagonals");
        assert_eq!(ps.minus_pairs.len(), 4);
    }

    #[test]
    fn degenerate_radius_is_rejected() {
        let lm = labels(Array3::zeros((1, 3, 3)), 2);
        assert!(build_pixel_pairs(&lm, 3).is_err());
        assert!(build_pixel_pairs(&lm, 2).is_ok());
        assert!(build_pixel_pairs(&lm, 0).is_err());
    }

    #[test]
    fn pair_sets_match_brute_force_on_random_maps() {
        let mut rng = crate::rng::rng_from(77);
        for _ in 0..50 {
            let h = rng.gen_range(2..=5);
            let w = rng.gen_range(2..=5);
            let radius = rng.gen_range(1..=2usize.min(h.min(w) - 1));
            let a = Array3::from_shape_simple_fn((2, h, w), || rng.gen_range(0..3u32));
            let lm = labels(a, 3);
            let ps = build_pixel_pairs(&lm, radius).unwrap();
            let (mut bp, mut bm) = brute_force_pairs(&lm, radius);
            let mut gp = ps.plus_pairs.clone();
            let mut gm = ps.minus_pairs.clone();
            gp.sort();
            gm.sort();
            bp.sort();
            bm.sort();
            assert_eq!(gp, bp);
            assert_eq!(gm, bm);
        }
    }

    #[test]
    fn constant_probability_map_saturates_hinge() {
        // every W_ij = 0: plus loss 0, minus loss = margin
        let mut a = Array4::<f64>::zeros((1, 2, 2, 2));
        a.slice_mut(ndarray::s![.., 0, .., ..]).fill(0.3);
        a.slice_mut(ndarray::s![.., 1, .., ..]).fill(0.7);
        let probs = probmap(a);
        let lm = labels(arr3(&[[[0u32, 1], [1, 0]]]), 2);
        let pairs = Arc::new(build_pixel_pairs(&lm, 1).unwrap());
        let out = affinity_loss(&probs, &pairs, 3.0, 1e-8, false).unwrap();
        assert_abs_diff_eq!(out.loss_plus, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(out.loss_minus, 3.0, epsilon = 1e-7);
        assert_abs_diff_eq!(out.loss_total, out.loss_plus + out.loss_minus, epsilon = 0.0);
    }

    #[test]
    fn two_pixel_closed_form_minus_pair() {
        // p_i = (0.9, 0.1), p_j = (0.1, 0.9): W = 0.8 ln 9
        let mut a = Array4::<f64>::zeros((1, 2, 1, 2));
        a[[0, 0, 0, 0]] = 0.9;
        a[[0, 1, 0, 0]] = 0.1;
        a[[0, 0, 0, 1]] = 0.1;
        a[[0, 1, 0, 1]] = 0.9;
        let probs = probmap(a);
        let w_ij = 0.8 * 9.0f64.ln();

        let lm = labels(arr3(&[[[0u32, 1]]]), 2);
        let pairs = Arc::new(build_pixel_pairs(&lm, 1).unwrap());
        let out = affinity_loss(&probs, &pairs, 3.0, 1e-12, false).unwrap();
        assert_abs_diff_eq!(out.loss_plus, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.loss_minus, 3.0 - w_ij, epsilon = 1e-4);
        assert_abs_diff_eq!(out.loss_minus, 1.2422, epsilon = 1e-4);
        assert_abs_diff_eq!(out.loss_total, 1.2422, epsilon = 1e-4);

        // same probabilities, same labels: pair routed to P+
        let lm = labels(arr3(&[[[0u32, 0]]]), 2);
        let pairs = Arc::new(build_pixel_pairs(&lm, 1).unwrap());
        let out = affinity_loss(&probs, &pairs, 3.0, 1e-12, false).unwrap();
        assert_abs_diff_eq!(out.loss_plus, w_ij, epsilon = 1e-4);
        assert_abs_diff_eq!(out.loss_plus, 1.7578, epsilon = 1e-4);
        assert_abs_diff_eq!(out.loss_minus, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn hinge_bounds_hold_and_pair_order_is_irrelevant() {
        let mut rng = crate::rng::rng_from(5150);
        for trial in 0..10 {
            let (h, w) = (4, 5);
            let raw = Array4::from_shape_simple_fn((1, 3, h, w), || rng.gen_range(0.1..1.0f64));
            let sums = raw.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1));
            let probs = probmap(raw / &sums);
            let lab = Array3::from_shape_simple_fn((1, h, w), || rng.gen_range(0..3u32));
            let lm = labels(lab, 3);
            let pairs = build_pixel_pairs(&lm, 1).unwrap();
            let m = 2.0;
            let arc = Arc::new(pairs.clone());
            let out = affinity_loss(&probs, &arc, m, 1e-8, false).unwrap();
            assert!(out.loss_plus >= 0.0);
            assert!(out.loss_minus >= 0.0 && out.loss_minus <= m, "trial {trial}");

            // permute stored pair order; losses must agree to 1e-9 relative
            let mut shuffled = pairs.clone();
            shuffled.plus_pairs.reverse();
            shuffled.minus_pairs.rotate_left(shuffled.minus_pairs.len() / 2);
            let out2 = affinity_loss(&probs, &Arc::new(shuffled), m, 1e-8, false).unwrap();
            let rel = (out.loss_total - out2.loss_total).abs() / out.loss_total.abs().max(1e-12);
            assert!(rel <= 1e-9);
        }
    }

    #[test]
    fn uniform_teacher_labels_zero_minus_loss() {
        let mut rng = crate::rng::rng_from(99);
        let raw = Array4::from_shape_simple_fn((1, 2, 3, 3), || rng.gen_range(0.05..1.0f64));
        let sums = raw.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1));
        let probs = probmap(raw / &sums);
        let lm = labels(Array3::from_elem((1, 3, 3), 1u32), 2);
        let pairs = Arc::new(build_pixel_pairs(&lm, 1).unwrap());
        let out = affinity_loss(&probs, &pairs, 3.0, 1e-8, false).unwrap();
        assert_eq!(out.pair_counts.1, 0);
        assert_eq!(out.loss_minus, 0.0);
    }

    #[test]
    fn shape_mismatch_and_bad_margin_are_rejected() {
        let probs = probmap(Array4::from_elem((1, 2, 2, 2), 0.5));
        let lm = labels(Array3::zeros((1, 3, 3)), 2);
        let pairs = Arc::new(build_pixel_pairs(&lm, 1).unwrap());
        assert!(affinity_loss(&probs, &pairs, 3.0, 1e-8, false).is_err());

        let lm = labels(Array3::zeros((1, 2, 2)), 2);
        let pairs = Arc::new(build_pixel_pairs(&lm, 1).unwrap());
        assert!(affinity_loss(&probs, &pairs, 0.0, 1e-8, false).is_err());
        assert!(affinity_loss(&probs, &pairs, -1.0, 1e-8, false).is_err());
    }
}
