//! Shape and finiteness contracts for the arrays that cross module
//! boundaries: activations, probability maps and label maps.

use crate::error::{Error, Result};
use ndarray::{Array3, Array4};

/// A batch of real-valued activations, shape `(batch, channels, h, w)`.
///
/// Construction rejects empty dimensions and non-finite entries, so a value
/// of this type never admits NaN/Inf into a loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4(Array4<f64>);

impl Tensor4 {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        let (n, c, h, w) = data.dim();
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidTensor(format!(
                "Tensor4: empty dimension in shape ({n}, {c}, {h}, {w})"
            )));
        }
        if let Some((idx, v)) = data
            .indexed_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(i, v)| (i, *v))
        {
            return Err(Error::InvalidTensor(format!(
                "Tensor4: non-finite value {v} at {idx:?}"
            )));
        }
        Ok(Tensor4(data))
    }

    pub fn array(&self) -> &Array4<f64> {
        &self.0
    }

    pub fn into_array(self) -> Array4<f64> {
        self.0
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        self.0.dim()
    }
}

/// A [`Tensor4`] whose channel axis is a probability simplex per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap(Tensor4);

impl ProbMap {
    /// Tolerance on the per-pixel channel sum.
    pub const SIMPLEX_TOL: f64 = 1e-6;

    pub fn new(t: Tensor4) -> Result<Self> {
        let (n, c, h, w) = t.shape();
        let a = t.array();
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let mut sum = 0.0;
                    for ch in 0..c {
                        let v = a[[b, ch, y, x]];
                        if !(-Self::SIMPLEX_TOL..=1.0 + Self::SIMPLEX_TOL).contains(&v) {
                            return Err(Error::InvalidTensor(format!(
                                "ProbMap: entry {v} at (b={b}, c={ch}, y={y}, x={x}) outside [0, 1]"
                            )));
                        }
                        sum += v;
                    }
                    if (sum - 1.0).abs() > Self::SIMPLEX_TOL {
                        return Err(Error::InvalidTensor(format!(
                            "ProbMap: channel sum {sum} at (b={b}, y={y}, x={x}) is not 1"
                        )));
                    }
                }
            }
        }
        Ok(ProbMap(t))
    }

    pub fn array(&self) -> &Array4<f64> {
        self.0.array()
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        self.0.shape()
    }
}

/// Integer class labels, shape `(batch, h, w)`, entries in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    data: Array3<u32>,
    num_classes: u32,
}

impl LabelMap {
    pub fn new(data: Array3<u32>, num_classes: u32) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidConfig("num_classes: must be >= 1".into()));
        }
        let (n, h, w) = data.dim();
        if n == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidTensor(format!(
                "LabelMap: empty dimension in shape ({n}, {h}, {w})"
            )));
        }
        if let Some((idx, v)) = data
            .indexed_iter()
            .find(|(_, &v)| v >= num_classes)
            .map(|(i, &v)| (i, v))
        {
            return Err(Error::InvalidTensor(format!(
                "LabelMap: label {v} at {idx:?} outside [0, {num_classes})"
            )));
        }
        Ok(LabelMap { data, num_classes })
    }

    pub fn array(&self) -> &Array3<u32> {
        &self.data
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }
}

/// Argmax over the channel axis of raw scores or probabilities.
pub fn argmax_labels(scores: &Array4<f64>, num_classes: u32) -> Result<LabelMap> {
    let (n, c, h, w) = scores.dim();
    if c as u32 > num_classes {
        return Err(Error::ShapeMismatch(format!(
            "argmax_labels: {c} channels exceed num_classes {num_classes}"
        )));
    }
    let mut out = Array3::<u32>::zeros((n, h, w));
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut best = 0usize;
                let mut bv = scores[[b, 0, y, x]];
                for ch in 1..c {
                    let v = scores[[b, ch, y, x]];
                    if v > bv {
                        bv = v;
                        best = ch;
                    }
                }
                out[[b, y, x]] = best as u32;
            }
        }
    }
    LabelMap::new(out, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr3;

    #[test]
    fn tensor4_rejects_nan_and_empty() {
        let mut a = Array4::<f64>::zeros((1, 1, 2, 2));
        a[[0, 0, 1, 1]] = f64::NAN;
        assert!(Tensor4::new(a).is_err());
        assert!(Tensor4::new(Array4::zeros((0, 1, 2, 2))).is_err());
    }

    #[test]
    fn probmap_checks_simplex() {
        let mut a = Array4::<f64>::zeros((1, 2, 1, 1));
        a[[0, 0, 0, 0]] = 0.25;
        a[[0, 1, 0, 0]] = 0.75;
        assert!(ProbMap::new(Tensor4::new(a.clone()).unwrap()).is_ok());
        a[[0, 1, 0, 0]] = 0.80;
        assert!(ProbMap::new(Tensor4::new(a).unwrap()).is_err());
    }

    #[test]
    fn labelmap_rejects_out_of_range() {
        let a = arr3(&[[[0u32, 1], [1, 2]]]);
        assert!(LabelMap::new(a.clone(), 3).is_ok());
        assert!(LabelMap::new(a, 2).is_err());
    }

    #[test]
    fn argmax_picks_max_channel() {
        let mut a = Array4::<f64>::zeros((1, 2, 1, 2));
        a[[0, 0, 0, 0]] = 1.0;
        a[[0, 1, 0, 1]] = 2.0;
        let lm = argmax_labels(&a, 2).unwrap();
        assert_eq!(lm.array()[[0, 0, 0]], 0);
        assert_eq!(lm.array()[[0, 0, 1]], 1);
    }
}
