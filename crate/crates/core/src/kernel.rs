//! Batch gram-matrix kernel loss.
//!
//! Each network's tapped feature map is projected by a learned 1x1
//! convolution into a common channel dimension, resized to a common spatial
//! size, then flattened per sample; the n x n gram matrix of inner products
//! captures the batch's relational structure. The loss is the mean squared
//! plus mean absolute difference between student and teacher gram matrices.

use crate::autograd::{gram_fwd, Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::Tensor4;
use ndarray::{Array2, Array4, ArrayView2};
use rand::Rng;

/// An n x n batch-similarity matrix. Symmetric and positive semidefinite by
/// construction (`X Xᵀ`, optionally scaled).
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub data: Array2<f64>,
    pub n: usize,
}

impl GramMatrix {
    /// Check symmetry, nonnegative diagonal and (in tests) approximate
    /// positive semidefiniteness via a Jacobi eigenvalue sweep.
    pub fn validate(&self) -> Result<()> {
        let k = &self.data;
        if k.dim() != (self.n, self.n) {
            return Err(Error::ShapeMismatch(format!(
                "GramMatrix: data shape {:?} vs n = {}",
                k.dim(),
                self.n
            )));
        }
        for i in 0..self.n {
            if k[[i, i]] < 0.0 {
                return Err(Error::InvalidTensor(format!(
                    "GramMatrix: negative diagonal entry at {i}"
                )));
            }
            for j in 0..i {
                if k[[i, j]] != k[[j, i]] {
                    return Err(Error::InvalidTensor(format!(
                        "GramMatrix: asymmetry at ({i}, {j})"
                    )));
                }
            }
        }
        let trace: f64 = (0..self.n).map(|i| k[[i, i]]).sum();
        let min_eig = jacobi_min_eigenvalue(k);
        if min_eig < -1e-6 * trace.max(1e-12) {
            return Err(Error::InvalidTensor(format!(
                "GramMatrix: eigenvalue {min_eig} below -1e-6 * trace {trace}"
            )));
        }
        Ok(())
    }
}

/// Smallest eigenvalue of a small symmetric matrix by cyclic Jacobi
/// rotations. Only used for validation, never in the training path.
fn jacobi_min_eigenvalue(m: &Array2<f64>) -> f64 {
    let n = m.dim().0;
    let mut a = m.clone();
    for _sweep in 0..50 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[[i, j]].abs();
            }
        }
        if off < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[[p, q]].abs() < 1e-18 {
                    continue;
                }
                let theta = 0.5 * (a[[q, q]] - a[[p, p]]) / a[[p, q]];
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[[i, i]]).fold(f64::INFINITY, f64::min)
}

/// A learned 1x1 convolution mapping tapped features into the common
/// channel dimension. No bias; trained jointly with the student.
#[derive(Debug, Clone)]
pub struct AlignmentProjector {
    /// Weight of shape (c_out, c_in, 1, 1).
    pub weights: Array4<f64>,
}

impl AlignmentProjector {
    pub fn new(c_in: usize, c_out: usize, seed: u64) -> Self {
        let mut rng = rng_from(seed);
        let std = (2.0 / c_in as f64).sqrt();
        let weights =
            Array4::from_shape_simple_fn((c_out, c_in, 1, 1), || rng.gen_range(-1.0..1.0) * std);
        AlignmentProjector { weights }
    }

    pub fn identity(c: usize) -> Self {
        let mut weights = Array4::zeros((c, c, 1, 1));
        for i in 0..c {
            weights[[i, i, 0, 0]] = 1.0;
        }
        AlignmentProjector { weights }
    }

    pub fn c_in(&self) -> usize {
        self.weights.dim().1
    }

    pub fn c_out(&self) -> usize {
        self.weights.dim().0
    }
}

/// Project features through the 1x1 alignment layer and bilinearly resize to
/// `target_hw`. Differentiable tape variant; `projector_node` is the leaf
/// carrying the projector weights.
pub fn align_features_node(
    g: &mut Graph,
    features: NodeId,
    projector_node: NodeId,
    target_hw: (usize, usize),
) -> Result<NodeId> {
    let projected = g.conv2d(features, projector_node, None, 0)?;
    g.resize_bilinear(projected, target_hw.0, target_hw.1)
}

/// No-grad convenience form of [`align_features_node`] over validated
/// tensors.
pub fn align_features(
    features: &Tensor4,
    projector: &AlignmentProjector,
    target_hw: (usize, usize),
) -> Result<Tensor4> {
    let (_, c, _, _) = features.shape();
    if c != projector.c_in() {
        return Err(Error::ShapeMismatch(format!(
            "align_features: {c} input channels, projector expects {}",
            projector.c_in()
        )));
    }
    if target_hw.0 == 0 || target_hw.1 == 0 {
        return Err(Error::ShapeMismatch(
            "align_features: target_hw must be >= (1, 1)".into(),
        ));
    }
    let mut g = Graph::new();
    let x = g.constant(features.array().clone());
    let w = g.constant(projector.weights.clone());
    let out = align_features_node(&mut g, x, w, target_hw)?;
    Tensor4::new(g.value4(out).to_owned())
}

/// Gram matrix of per-sample flattened features. Entries are scaled by
/// `1/(c*h*w)` unless `raw` is set, keeping the loss magnitude independent
/// of feature resolution.
pub fn gram_matrix(features: &Tensor4, raw: bool) -> GramMatrix {
    let (n, c, h, w) = features.shape();
    let scale = if raw { 1.0 } else { 1.0 / (c * h * w) as f64 };
    let data = gram_fwd(&features.array().view(), scale);
    GramMatrix { data, n }
}

/// Gram scale factor matching [`gram_matrix`], for tape composition.
pub fn gram_scale(c: usize, h: usize, w: usize, raw: bool) -> f64 {
    if raw {
        1.0
    } else {
        1.0 / (c * h * w) as f64
    }
}

pub(crate) fn kernel_loss_value(ks: &ArrayView2<f64>, kt: &ArrayView2<f64>) -> f64 {
    let n2 = (ks.dim().0 * ks.dim().1) as f64;
    let mut sq = 0.0;
    let mut l1 = 0.0;
    for (a, b) in ks.iter().zip(kt.iter()) {
        let d = a - b;
        sq += d * d;
        l1 += d.abs();
    }
    sq / n2 + l1 / n2
}

/// d(loss)/d(Ks); the Kt gradient is its negation.
pub(crate) fn kernel_loss_grad(ks: &ArrayView2<f64>, kt: &ArrayView2<f64>) -> Array2<f64> {
    let n2 = (ks.dim().0 * ks.dim().1) as f64;
    let mut g = Array2::<f64>::zeros(ks.raw_dim());
    for ((ga, a), b) in g.iter_mut().zip(ks.iter()).zip(kt.iter()) {
        let d = a - b;
        *ga = (2.0 * d + d.signum()) / n2;
    }
    g
}

/// Mean squared plus mean absolute difference of the two gram matrices,
/// averaged over all n^2 entries. Zero iff the matrices are equal.
pub fn kernel_loss(ks: &GramMatrix, kt: &GramMatrix) -> Result<f64> {
    if ks.n != kt.n || ks.data.dim() != kt.data.dim() {
        return Err(Error::ShapeMismatch(format!(
            "kernel_loss: gram sizes {} vs {}",
            ks.n, kt.n
        )));
    }
    Ok(kernel_loss_value(&ks.data.view(), &kt.data.view()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr2, Array4};
    use rand::Rng;

    fn t4(a: Array4<f64>) -> Tensor4 {
        Tensor4::new(a).unwrap()
    }

    #[test]
    fn identity_projection_at_same_size_is_identity() {
        let mut rng = crate::rng::rng_from(3);
        let x = Array4::from_shape_simple_fn((2, 3, 4, 4), || rng.gen_range(-1.0..1.0));
        let proj = AlignmentProjector::identity(3);
        let y = align_features(&t4(x.clone()), &proj, (4, 4)).unwrap();
        assert_eq!(y.array(), &x);
    }

    #[test]
    fn projection_shape_contract() {
        let x = Array4::from_elem((1, 4, 2, 2), 1.0);
        let proj = AlignmentProjector::new(4, 2, 7);
        let y = align_features(&t4(x), &proj, (2, 2)).unwrap();
        assert_eq!(y.shape(), (1, 2, 2, 2));
    }

    #[test]
    fn constant_input_projects_to_row_sums() {
        let c = 0.37;
        let x = Array4::from_elem((1, 3, 2, 2), c);
        let proj = AlignmentProjector::new(3, 2, 11);
        let y = align_features(&t4(x), &proj, (2, 2)).unwrap();
        for co in 0..2 {
            let row_sum: f64 = (0..3).map(|ci| proj.weights[[co, ci, 0, 0]]).sum();
            for yy in 0..2 {
                for xx in 0..2 {
                    assert_abs_diff_eq!(
                        y.array()[[0, co, yy, xx]],
                        row_sum * c,
                        epsilon = 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn projector_channel_mismatch_is_rejected() {
        let x = Array4::from_elem((1, 4, 2, 2), 1.0);
        let proj = AlignmentProjector::new(3, 2, 7);
        assert!(align_features(&t4(x), &proj, (2, 2)).is_err());
    }

    #[test]
    fn gram_of_all_ones_sample_is_one() {
        // c*h*w = 4, self inner product 4, scale 1/4
        let x = Array4::from_elem((1, 1, 2, 2), 1.0);
        let k = gram_matrix(&t4(x), false);
        assert_abs_diff_eq!(k.data[[0, 0]], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn orthogonal_samples_have_zero_off_diagonal() {
        let mut x = Array4::<f64>::zeros((2, 1, 1, 2));
        x[[0, 0, 0, 0]] = 1.0;
        x[[1, 0, 0, 1]] = 1.0;
        let k = gram_matrix(&t4(x), false);
        assert_eq!(k.data[[0, 1]], 0.0);
        assert_eq!(k.data[[1, 0]], 0.0);
    }

    #[test]
    fn gram_closed_form_two_samples() {
        // x1 = (1,2), x2 = (3,4), scale 1/2
        let mut x = Array4::<f64>::zeros((2, 1, 1, 2));
        x[[0, 0, 0, 0]] = 1.0;
        x[[0, 0, 0, 1]] = 2.0;
        x[[1, 0, 0, 0]] = 3.0;
        x[[1, 0, 0, 1]] = 4.0;
        let k = gram_matrix(&t4(x), false);
        let want = arr2(&[[2.5, 5.5], [5.5, 12.5]]);
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(k.data[[i, j]], want[[i, j]], epsilon = 1e-12);
            }
        }
        k.validate().unwrap();
    }

    #[test]
    fn raw_mode_skips_scaling() {
        let x = Array4::from_elem((1, 1, 2, 2), 1.0);
        let k = gram_matrix(&t4(x), true);
        assert_abs_diff_eq!(k.data[[0, 0]], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn kernel_loss_zero_iff_equal_and_closed_forms() {
        let a = GramMatrix {
            data: arr2(&[[1.0, 0.5], [0.5, 2.0]]),
            n: 2,
        };
        assert_eq!(kernel_loss(&a, &a).unwrap(), 0.0);

        // n = 1: (1-3)^2 + |1-3| = 6
        let k1 = GramMatrix {
            data: arr2(&[[1.0]]),
            n: 1,
        };
        let k3 = GramMatrix {
            data: arr2(&[[3.0]]),
            n: 1,
        };
        assert_abs_diff_eq!(kernel_loss(&k1, &k3).unwrap(), 6.0, epsilon = 1e-12);

        // n = 2, difference all ones: mean sq 1 + mean abs 1 = 2
        let z = GramMatrix {
            data: arr2(&[[0.0, 0.0], [0.0, 0.0]]),
            n: 2,
        };
        let o = GramMatrix {
            data: arr2(&[[1.0, 1.0], [1.0, 1.0]]),
            n: 2,
        };
        assert_abs_diff_eq!(kernel_loss(&z, &o).unwrap(), 2.0, epsilon = 1e-12);

        let bad = GramMatrix {
            data: arr2(&[[1.0]]),
            n: 1,
        };
        assert!(kernel_loss(&a, &bad).is_err());
    }

    #[test]
    fn kernel_loss_value_is_swap_symmetric() {
        let mut rng = crate::rng::rng_from(8);
        let a = Array2::from_shape_simple_fn((3, 3), || rng.gen_range(-2.0..2.0));
        let b = Array2::from_shape_simple_fn((3, 3), || rng.gen_range(-2.0..2.0));
        let ab = kernel_loss_value(&a.view(), &b.view());
        let ba = kernel_loss_value(&b.view(), &a.view());
        assert!((ab - ba).abs() <= 1e-12);
    }

    #[test]
    fn random_gram_matrices_validate_as_psd() {
        let mut rng = crate::rng::rng_from(21);
        for n in [1usize, 2, 4, 7] {
            let x = Array4::from_shape_simple_fn((n, 2, 3, 3), || rng.gen_range(-1.0..1.0));
            gram_matrix(&t4(x), false).validate().unwrap();
        }
    }
}
