//! Shared numeric primitives: stable softmax and clamped KL divergence.
//!
//! These are the scalar-vector reference forms used by every loss module;
//! the batched tensor paths in [`crate::autograd`] reduce to them.

use crate::error::{Error, Result};

/// Numerically stable softmax. Subtracts the max before exponentiating, so
/// adding a constant to all inputs leaves the output unchanged.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidTensor("softmax: empty input".into()));
    }
    for (i, &v) in logits.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::InvalidTensor(format!(
                "softmax: non-finite input {v} at index {i}"
            )));
        }
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let sum: f64 = exp.iter().sum();
    Ok(exp.iter().map(|&e| e / sum).collect())
}

/// Check that `p` lies on the probability simplex within `tol`.
fn check_simplex(name: &str, p: &[f64], tol: f64) -> Result<()> {
    let mut sum = 0.0;
    for (i, &v) in p.iter().enumerate() {
        if !v.is_finite() || v < -tol || v > 1.0 + tol {
            return Err(Error::InvalidTensor(format!(
                "{name}: entry {v} at index {i} outside [0, 1]"
            )));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > tol {
        return Err(Error::InvalidTensor(format!(
            "{name}: entries sum to {sum}, not 1"
        )));
    }
    Ok(())
}

/// KL divergence `sum_i p_i * ln((p_i + eps) / (q_i + eps))`.
///
/// Both arguments are clamped by `eps` before the log so zero probabilities
/// stay finite and differentiable. The clamp admits a small negative slack:
/// the result is >= -k*eps rather than exactly >= 0.
pub fn kl_div(p: &[f64], q: &[f64], eps: f64) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch(format!(
            "kl_div: p has length {}, q has length {}",
            p.len(),
            q.len()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig("epsilon: must be > 0".into()));
    }
    check_simplex("kl_div p", p, 1e-6)?;
    check_simplex("kl_div q", q, 1e-6)?;
    Ok(kl_div_unchecked(p, q, eps))
}

/// The KL sum without simplex validation, for hot loops that already hold
/// softmax outputs.
#[inline]
pub fn kl_div_unchecked(p: &[f64], q: &[f64], eps: f64) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| pi * ((pi + eps) / (qi + eps)).ln())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softmax_equal_logits() {
        // symmetry of equal logits
        let p = softmax(&[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.5, epsilon = 1e-12);
        // shift invariance for any constant, including extremes
        for c in [-1e6, -3.0, 0.0, 17.5, 1e6] {
            let p = softmax(&[c, c, c]).unwrap();
            for &v in &p {
                assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn softmax_closed_form() {
        // softmax(ln 2, 0) = (2/3, 1/3)
        let p = softmax(&[2.0f64.ln(), 0.0]).unwrap();
        assert_abs_diff_eq!(p[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let err = softmax(&[0.0, f64::NAN]).unwrap_err();
        assert!(err.to_string().contains("index 1"), "{err}");
        let err = softmax(&[f64::INFINITY, 0.0]).unwrap_err();
        assert!(err.to_string().contains("index 0"), "{err}");
    }

    #[test]
    fn kl_identical_is_zero() {
        let p = [0.3, 0.7];
        assert_abs_diff_eq!(kl_div(&p, &p, 1e-8).unwrap(), 0.0, epsilon = 1e-7);
    }

    #[test]
    fn kl_closed_form() {
        // KL((.5,.5) || (.9,.1)) = 0.5*ln(25/9)
        let v = kl_div(&[0.5, 0.5], &[0.9, 0.1], 1e-12).unwrap();
        assert_abs_diff_eq!(v, 0.5 * (25.0f64 / 9.0).ln(), epsilon = 1e-9);
        assert_abs_diff_eq!(v, 0.5108, epsilon = 1e-4);
    }

    #[test]
    fn kl_clamped_closed_form() {
        // KL((1,0) || (.5,.5)) with eps = 1e-8 is ~ ln 2
        let v = kl_div(&[1.0, 0.0], &[0.5, 0.5], 1e-8).unwrap();
        assert_abs_diff_eq!(v, 2.0f64.ln(), epsilon = 1e-4);
    }

    #[test]
    fn kl_rejects_mismatch_and_off_simplex() {
        assert!(kl_div(&[1.0], &[0.5, 0.5], 1e-8).is_err());
        assert!(kl_div(&[0.6, 0.6], &[0.5, 0.5], 1e-8).is_err());
        assert!(kl_div(&[1.2, -0.2], &[0.5, 0.5], 1e-8).is_err());
    }

    #[test]
    fn kl_is_asymmetric() {
        let a = kl_div(&[0.5, 0.5], &[0.9, 0.1], 1e-12).unwrap();
        let b = kl_div(&[0.9, 0.1], &[0.5, 0.5], 1e-12).unwrap();
        assert!((a - b).abs() > 1e-3, "expected asymmetry, got {a} vs {b}");
    }
}
