//! Registry of toy teacher and student encoder-decoder networks.
//!
//! Each network is a small U-shaped conv net: per encoder stage one 3x3
//! conv + relu followed by 2x2 max pooling, a 3x3 bottleneck conv, and a
//! mirrored decoder of bilinear 2x upsampling, skip concatenation and a 3x3
//! conv, closed by a 1x1 classification head. Teachers carry at least ten
//! times the parameters of every student, mirroring the capacity gap the
//! distillation setup assumes. The registry is open: any
//! [`SegNetworkSpec`] builds the same topology at other widths.

use crate::autograd::{conv2d_fwd, Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::{child_seed, rng_from};
use ndarray::{Array4, ArrayView4};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Architecture description: widths of the encoder stages (depth = number
/// of 2x downsamplings), and the class count of the 1x1 head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegNetworkSpec {
    pub name: String,
    pub encoder_widths: Vec<usize>,
    pub depth: usize,
    pub num_classes: usize,
}

impl SegNetworkSpec {
    pub fn new(name: &str, widths: &[usize], num_classes: usize) -> Self {
        SegNetworkSpec {
            name: name.to_string(),
            encoder_widths: widths.to_vec(),
            depth: widths.len(),
            num_classes,
        }
    }

    /// Exact parameter count of the topology this spec builds
    /// (`c_out*c_in*k*k + c_out` per conv).
    pub fn param_count(&self) -> usize {
        let ws = &self.encoder_widths;
        let d = self.depth;
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let mut total = 0;
        let mut cin = 1; // grayscale input
        for &w in ws {
            total += conv(cin, w, 3);
            cin = w;
        }
        total += conv(ws[d - 1], ws[d - 1], 3);
        let mut prev = ws[d - 1];
        for i in (0..d).rev() {
            let skip = ws[i];
            let cout = if i == 0 { ws[0] } else { ws[i - 1] };
            total += conv(prev + skip, cout, 3);
            prev = cout;
        }
        total + conv(ws[0], self.num_classes, 1)
    }
}

/// Names the five registered model specs: two teachers and three students.
pub const REGISTRY: [&str; 5] = [
    "toy_teacher_large",
    "toy_teacher_deep",
    "toy_student_s",
    "toy_student_xs",
    "toy_student_m",
];

/// Registry spec for a model name.
pub fn registry_spec(name: &str, num_classes: usize) -> Result<SegNetworkSpec> {
    let widths: &[usize] = match name {
        "toy_teacher_large" => &[12, 24],
        "toy_teacher_deep" => &[5, 10, 15],
        "toy_student_m" => &[3, 4],
        "toy_student_s" => &[2, 4],
        "toy_student_xs" => &[2, 3],
        _ => {
            return Err(Error::Lookup(format!(
                "unknown model `{name}`; registry: {}",
                REGISTRY.join(", ")
            )))
        }
    };
    Ok(SegNetworkSpec::new(name, widths, num_classes))
}

/// One convolution's parameters. Bias is stored `(1, c_out, 1, 1)` so every
/// parameter tensor is 4-d.
#[derive(Debug, Clone)]
pub struct ConvParams {
    pub w: Array4<f64>,
    pub b: Array4<f64>,
}

impl ConvParams {
    fn init(cin: usize, cout: usize, k: usize, rng: &mut impl Rng) -> Self {
        // He-style uniform fan-in scaling
        let bound = (6.0 / (cin * k * k) as f64).sqrt();
        let w = Array4::from_shape_simple_fn((cout, cin, k, k), || rng.gen_range(-bound..bound));
        let b = Array4::zeros((1, cout, 1, 1));
        ConvParams { w, b }
    }
}

/// Named intermediate activations captured during a forward pass.
pub type FeatureTaps = BTreeMap<String, Array4<f64>>;

/// Tape node handles for the same taps, used when the pass must be
/// differentiable.
pub type FeatureTapNodes = BTreeMap<String, NodeId>;

/// A built network: spec plus parameters.
#[derive(Debug, Clone)]
pub struct SegNetwork {
    pub spec: SegNetworkSpec,
    pub enc: Vec<ConvParams>,
    pub bottleneck: ConvParams,
    pub dec: Vec<ConvParams>,
    pub head: ConvParams,
}

/// Build a registered model with deterministic initialization.
pub fn build_model(name: &str, num_classes: usize, seed: u64) -> Result<SegNetwork> {
    let spec = registry_spec(name, num_classes)?;
    Ok(SegNetwork::from_spec(spec, seed))
}

impl SegNetwork {
    pub fn from_spec(spec: SegNetworkSpec, seed: u64) -> Self {
        let mut rng = rng_from(child_seed(seed, &["model_init", &spec.name]));
        let ws = &spec.encoder_widths;
        let d = spec.depth;
        let mut enc = Vec::with_capacity(d);
        let mut cin = 1;
        for &w in ws {
            enc.push(ConvParams::init(cin, w, 3, &mut rng));
            cin = w;
        }
        let bottleneck = ConvParams::init(ws[d - 1], ws[d - 1], 3, &mut rng);
        let mut dec = Vec::with_capacity(d);
        let mut prev = ws[d - 1];
        for i in (0..d).rev() {
            let cout = if i == 0 { ws[0] } else { ws[i - 1] };
            dec.push(ConvParams::init(prev + ws[i], cout, 3, &mut rng));
            prev = cout;
        }
        let head = ConvParams::init(ws[0], spec.num_classes, 1, &mut rng);
        SegNetwork {
            spec,
            enc,
            bottleneck,
            dec,
            head,
        }
    }

    /// Exact number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Stable-named views of every parameter tensor.
    pub fn named_params(&self) -> Vec<(String, &Array4<f64>)> {
        let mut out = Vec::new();
        for (i, c) in self.enc.iter().enumerate() {
            out.push((format!("enc{i}.w"), &c.w));
            out.push((format!("enc{i}.b"), &c.b));
        }
        out.push(("bottleneck.w".to_string(), &self.bottleneck.w));
        out.push(("bottleneck.b".to_string(), &self.bottleneck.b));
        for (i, c) in self.dec.iter().enumerate() {
            out.push((format!("dec{i}.w"), &c.w));
            out.push((format!("dec{i}.b"), &c.b));
        }
        out.push(("head.w".to_string(), &self.head.w));
        out.push(("head.b".to_string(), &self.head.b));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Array4<f64>)> {
        let mut out: Vec<(String, &mut Array4<f64>)> = Vec::new();
        for (i, c) in self.enc.iter_mut().enumerate() {
            out.push((format!("enc{i}.w"), &mut c.w));
            out.push((format!("enc{i}.b"), &mut c.b));
        }
        out.push(("bottleneck.w".to_string(), &mut self.bottleneck.w));
        out.push(("bottleneck.b".to_string(), &mut self.bottleneck.b));
        for (i, c) in self.dec.iter_mut().enumerate() {
            out.push((format!("dec{i}.w"), &mut c.w));
            out.push((format!("dec{i}.b"), &mut c.b));
        }
        out.push(("head.w".to_string(), &mut self.head.w));
        out.push(("head.b".to_string(), &mut self.head.b));
        out
    }

    /// Valid tap identifiers for this architecture.
    pub fn tap_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = (1..=self.spec.depth).map(|i| format!("enc{i}")).collect();
        ids.push("enc_last".to_string());
        ids.push("bottleneck".to_string());
        ids
    }

    fn check_input(&self, dim: (usize, usize, usize, usize)) -> Result<()> {
        let (_, c, h, w) = dim;
        if c != 1 {
            return Err(Error::ShapeMismatch(format!(
                "forward: expected 1 input channel, got {c}"
            )));
        }
        let div = 1 << self.spec.depth;
        if h % div != 0 || w % div != 0 {
            return Err(Error::ShapeMismatch(format!(
                "forward: spatial dims ({h}, {w}) must be divisible by 2^depth = {div}"
            )));
        }
        Ok(())
    }

    fn check_taps(&self, taps: &[&str]) -> Result<()> {
        let valid = self.tap_ids();
        for t in taps {
            if !valid.iter().any(|v| v == t) {
                return Err(Error::Lookup(format!(
                    "unknown tap `{t}`; valid taps: {}",
                    valid.join(", ")
                )));
            }
        }
        Ok(())
    }

    /// No-grad forward pass, returning logits plus the requested taps.
    /// This is the teacher/evaluation path.
    pub fn forward_with_features(
        &self,
        batch: &ArrayView4<f64>,
        taps: &[&str],
    ) -> Result<(Array4<f64>, FeatureTaps)> {
        self.check_input(batch.dim())?;
        self.check_taps(taps)?;
        let mut captured = FeatureTaps::new();
        let want = |name: &str| taps.iter().any(|t| *t == name);

        let relu = |mut a: Array4<f64>| {
            a.mapv_inplace(|v| v.max(0.0));
            a
        };
        let pool = |a: &Array4<f64>| {
            let (n, c, h, w) = a.dim();
            let mut y = Array4::<f64>::zeros((n, c, h / 2, w / 2));
            for b in 0..n {
                for ch in 0..c {
                    for oy in 0..h / 2 {
                        for ox in 0..w / 2 {
                            let mut best = f64::NEG_INFINITY;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    best = best.max(a[[b, ch, 2 * oy + dy, 2 * ox + dx]]);
                                }
                            }
                            y[[b, ch, oy, ox]] = best;
                        }
                    }
                }
            }
            y
        };

        let mut x = batch.to_owned();
        let mut skips = Vec::with_capacity(self.spec.depth);
        for (i, c) in self.enc.iter().enumerate() {
            let s = relu(conv2d_fwd(&x.view(), &c.w.view(), Some(c.b.view()), 1));
            x = pool(&s);
            skips.push(s);
            let id = format!("enc{}", i + 1);
            if want(&id) {
                captured.insert(id, x.clone());
            }
            if i + 1 == self.spec.depth && want("enc_last") {
                captured.insert("enc_last".to_string(), x.clone());
            }
        }
        x = relu(conv2d_fwd(
            &x.view(),
            &self.bottleneck.w.view(),
            Some(self.bottleneck.b.view()),
            1,
        ));
        if want("bottleneck") {
            captured.insert("bottleneck".to_string(), x.clone());
        }
        for (j, c) in self.dec.iter().enumerate() {
            let skip = &skips[self.spec.depth - 1 - j];
            let (_, _, sh, sw) = skip.dim();
            let up = crate::autograd::resize_bilinear_fwd(&x.view(), sh, sw);
            let cat = ndarray::concatenate(ndarray::Axis(1), &[up.view(), skip.view()])
                .expect("matched spatial dims");
            x = relu(conv2d_fwd(&cat.view(), &c.w.view(), Some(c.b.view()), 1));
        }
        let logits = conv2d_fwd(&x.view(), &self.head.w.view(), Some(self.head.b.view()), 0);
        Ok((logits, captured))
    }

    /// Plain no-grad forward to logits.
    pub fn forward(&self, batch: &ArrayView4<f64>) -> Result<Array4<f64>> {
        Ok(self.forward_with_features(batch, &[])?.0)
    }

    /// Differentiable forward on a tape. Returns the logits node, tap nodes,
    /// and the leaf node of every parameter (aligned with
    /// [`SegNetwork::named_params`]) for the optimizer to read gradients
    /// from.
    pub fn forward_tape(
        &self,
        g: &mut Graph,
        batch: NodeId,
        taps: &[&str],
    ) -> Result<(NodeId, FeatureTapNodes, Vec<(String, NodeId)>)> {
        self.check_input(g.value4(batch).dim())?;
        self.check_taps(taps)?;
        let mut param_nodes = Vec::new();
        let mut captured = FeatureTapNodes::new();
        let want = |name: &str| taps.iter().any(|t| *t == name);
        let mut lift = |g: &mut Graph, name: String, p: &Array4<f64>| {
            let id = g.leaf(p.clone());
            param_nodes.push((name, id));
            id
        };

        let mut x = batch;
        let mut skips = Vec::with_capacity(self.spec.depth);
        for (i, c) in self.enc.iter().enumerate() {
            let w = lift(g, format!("enc{i}.w"), &c.w);
            let b = lift(g, format!("enc{i}.b"), &c.b);
            let conv = g.conv2d(x, w, Some(b), 1)?;
            let s = g.relu(conv);
            x = g.maxpool2(s)?;
            skips.push(s);
            let id = format!("enc{}", i + 1);
            if want(&id) {
                captured.insert(id, x);
            }
            if i + 1 == self.spec.depth && want("enc_last") {
                captured.insert("enc_last".to_string(), x);
            }
        }
        let w = lift(g, "bottleneck.w".to_string(), &self.bottleneck.w);
        let b = lift(g, "bottleneck.b".to_string(), &self.bottleneck.b);
        let conv = g.conv2d(x, w, Some(b), 1)?;
        x = g.relu(conv);
        if want("bottleneck") {
            captured.insert("bottleneck".to_string(), x);
        }
        for (j, c) in self.dec.iter().enumerate() {
            let skip = skips[self.spec.depth - 1 - j];
            let (_, _, sh, sw) = g.value4(skip).dim();
            let up = g.resize_bilinear(x, sh, sw)?;
            let cat = g.concat_channels(up, skip)?;
            let w = lift(g, format!("dec{j}.w"), &c.w);
            let b = lift(g, format!("dec{j}.b"), &c.b);
            let conv = g.conv2d(cat, w, Some(b), 1)?;
            x = g.relu(conv);
        }
        let w = lift(g, "head.w".to_string(), &self.head.w);
        let b = lift(g, "head.b".to_string(), &self.head.b);
        let logits = g.conv2d(x, w, Some(b), 0)?;
        Ok((logits, captured, param_nodes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn registry_builds_and_counts_match_spec_formula() {
        for name in REGISTRY {
            let model = build_model(name, 2, 7).unwrap();
            assert_eq!(
                model.param_count(),
                model.spec.param_count(),
                "formula mismatch for {name}"
            );
        }
    }

    /// Independent parameter-count oracle: walk the topology widths by hand.
    #[test]
    fn param_counts_against_hand_derivation() {
        // toy_student_s = [2, 4]: 20 + 76 + 148 + 146 + 74 + 6 = 470
        let m = build_model("toy_student_s", 2, 1).unwrap();
        assert_eq!(m.param_count(), 470);
        // toy_teacher_deep = [5, 10, 15]:
        // 50 + 460 + 1365 + 2040 + 2710 + 905 + 455 + 12 = 7997
        let m = build_model("toy_teacher_deep", 2, 1).unwrap();
        assert_eq!(m.param_count(), 7997);
    }

    #[test]
    fn teachers_are_at_least_ten_times_every_student() {
        let teachers = ["toy_teacher_large", "toy_teacher_deep"];
        let students = ["toy_student_s", "toy_student_xs", "toy_student_m"];
        for t in teachers {
            let tc = build_model(t, 2, 1).unwrap().param_count();
            for s in students {
                let sc = build_model(s, 2, 1).unwrap().param_count();
                assert!(
                    tc >= 10 * sc,
                    "{t} ({tc}) not >= 10x {s} ({sc})"
                );
            }
        }
    }

    #[test]
    fn unknown_name_lists_registry() {
        let err = build_model("resnet152", 2, 1).unwrap_err();
        let msg = err.to_string();
        for name in REGISTRY {
            assert!(msg.contains(name), "{msg}");
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model("toy_student_xs", 2, 99).unwrap();
        let b = build_model("toy_student_xs", 2, 99).unwrap();
        for ((_, pa), (_, pb)) in a.named_params().iter().zip(b.named_params()) {
            assert_eq!(*pa, &pb);
        }
        let c = build_model("toy_student_xs", 2, 100).unwrap();
        assert_ne!(a.enc[0].w, c.enc[0].w);
    }

    #[test]
    fn forward_shape_contract_across_sizes() {
        for name in REGISTRY {
            let model = build_model(name, 2, 3).unwrap();
            for size in [32usize, 64, 128] {
                let x = Array4::<f64>::zeros((2, 1, size, size));
                let y = model.forward(&x.view()).unwrap();
                assert_eq!(y.dim(), (2, 2, size, size), "{name} at {size}");
            }
        }
    }

    #[test]
    fn depth3_width32_enc_last_tap_shape() {
        let spec = SegNetworkSpec::new("probe", &[8, 16, 32], 2);
        let model = SegNetwork::from_spec(spec, 5);
        let x = Array4::<f64>::zeros((2, 1, 64, 64));
        let (logits, taps) = model
            .forward_with_features(&x.view(), &["enc_last"])
            .unwrap();
        assert_eq!(logits.dim(), (2, 2, 64, 64));
        assert_eq!(taps["enc_last"].dim(), (2, 32, 8, 8));
    }

    #[test]
    fn empty_taps_leave_logits_unchanged() {
        let model = build_model("toy_student_xs", 2, 3).unwrap();
        let mut rng = crate::rng::rng_from(8);
        use rand::Rng;
        let x = Array4::from_shape_simple_fn((1, 1, 32, 32), || rng.gen_range(0.0..1.0));
        let (y1, taps) = model.forward_with_features(&x.view(), &[]).unwrap();
        assert!(taps.is_empty());
        let y2 = model.forward(&x.view()).unwrap();
        assert_eq!(y1, y2);
    }

    #[test]
    fn unknown_tap_is_rejected() {
        let model = build_model("toy_student_xs", 2, 3).unwrap();
        let x = Array4::<f64>::zeros((1, 1, 32, 32));
        let err = model
            .forward_with_features(&x.view(), &["enc_99"])
            .unwrap_err();
        assert!(err.to_string().contains("enc_last"), "{err}");
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let model = build_model("toy_teacher_deep", 2, 3).unwrap();
        let x = Array4::<f64>::zeros((1, 1, 36, 36)); // not divisible by 8
        assert!(model.forward(&x.view()).is_err());
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let model = build_model("toy_student_m", 2, 11).unwrap();
        let mut rng = crate::rng::rng_from(12);
        use rand::Rng;
        let x = Array4::from_shape_simple_fn((2, 1, 32, 32), || rng.gen_range(0.0..1.0));
        let plain = model.forward(&x.view()).unwrap();
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let (logits, _, _) = model.forward_tape(&mut g, xn, &[]).unwrap();
        let taped = g.value4(logits).to_owned();
        assert_eq!(plain, taped);
    }
}
