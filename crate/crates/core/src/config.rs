//! Experiment configuration: a single JSON document that drives data
//! generation, training, distillation and the ablation grid.
//!
//! The JSON schema mirrors [`ExperimentConfig`] field for field. Validation
//! errors name the offending field path (`loss_weights.lambda1`, ...) so CLI
//! users can fix the file directly.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Weights of the three distillation terms in the total objective:
/// `lambda1` scales the logits term, `lambda2` the kernel term and
/// `lambda3` the affinity term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        // empirical settings from the source method
        LossWeights {
            lambda1: 0.2,
            lambda2: 0.9,
            lambda3: 0.9,
        }
    }
}

/// Which distillation modules participate in a run. All off = supervised
/// baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ModuleFlags {
    pub use_aam: bool,
    pub use_kmm: bool,
    pub use_lm: bool,
}

impl ModuleFlags {
    pub fn all_on() -> Self {
        ModuleFlags {
            use_aam: true,
            use_kmm: true,
            use_lm: true,
        }
    }

    pub fn label(&self) -> String {
        if !self.use_aam && !self.use_kmm && !self.use_lm {
            return "baseline".to_string();
        }
        let mut parts = Vec::new();
        if self.use_aam {
            parts.push("AAM");
        }
        if self.use_kmm {
            parts.push("KMM");
        }
        if self.use_lm {
            parts.push("LM");
        }
        format!("+{}", parts.join("+"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Cyclic schedule half-period in optimizer steps. `None` scales the
    /// published step count to the dataset: two epochs of batches.
    pub schedule_step: Option<usize>,
    pub min_lr: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.01,
            schedule_step: None,
            min_lr: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityConfig {
    /// Compare per-class Bernoulli distributions summed over classes instead
    /// of one KL over the full class vector.
    pub per_class_kl: bool,
}

impl Default for AffinityConfig {
    fn default() -> Self {
        AffinityConfig {
            per_class_kl: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    /// Common channel dimension both projectors map into.
    pub common_dim: usize,
    /// Use raw inner products instead of scaling gram entries by 1/(c*h*w).
    pub raw_gram: bool,
    /// Feature taps fed to the kernel loss; losses over multiple taps are
    /// summed.
    pub tap_layers: Vec<String>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            common_dim: 32,
            raw_gram: false,
            tap_layers: vec!["enc_last".to_string()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsConfig {
    /// Swap the KL direction to the classical teacher-first form.
    pub kl_reverse: bool,
    /// Softmax temperature. 1.0 = no softening, no loss rescaling applied.
    pub temperature: f64,
}

impl Default for LogitsConfig {
    fn default() -> Self {
        LogitsConfig {
            kl_reverse: false,
            temperature: 1.0,
        }
    }
}

/// Which supervised segmentation loss to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegLossKind {
    Dice,
    Focal,
    DiceFocal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegConfig {
    pub seg_loss: SegLossKind,
    /// Focal focusing parameter.
    pub gamma: f64,
    /// Dice smoothing constant.
    pub smooth: f64,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            seg_loss: SegLossKind::DiceFocal,
            gamma: 2.0,
            smooth: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub samples_per_site: usize,
    pub image_size: usize,
    /// Fraction of non-target sites that train the teacher (by whole site).
    pub teacher_fraction: f64,
    /// When set, load site datasets from `<data_dir>/<site>` instead of
    /// generating them.
    pub data_dir: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            samples_per_site: 100,
            image_size: 64,
            teacher_fraction: 0.6,
            data_dir: None,
        }
    }
}

/// The full experiment description. Serialized as a single JSON document;
/// every CLI entry point accepts `--config FILE` plus `--set key=value`
/// overrides addressed by dotted field path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub sites: Vec<String>,
    pub target_site: String,
    pub teacher_name: String,
    pub student_name: String,
    pub module_flags: ModuleFlags,
    pub loss_weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Margin of the separating force in the affinity hinge.
    pub margin: f64,
    /// Chebyshev radius of the pixel neighborhood.
    pub neighborhood_radius: usize,
    /// Clamp added to both KL arguments before the log.
    pub epsilon: f64,
    pub affinity: AffinityConfig,
    pub kernel: KernelConfig,
    pub logits: LogitsConfig,
    pub seg: SegConfig,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            sites: (1..=6).map(|i| format!("S{i}")).collect(),
            target_site: "S3".to_string(),
            teacher_name: "toy_teacher_deep".to_string(),
            student_name: "toy_student_s".to_string(),
            module_flags: ModuleFlags::all_on(),
            loss_weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            epochs: 30,
            batch_size: 16,
            margin: 3.0,
            neighborhood_radius: 1,
            epsilon: 1e-8,
            affinity: AffinityConfig::default(),
            kernel: KernelConfig::default(),
            logits: LogitsConfig::default(),
            seg: SegConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Validate invariants. Error messages name the offending field path.
    pub fn validate(&self) -> Result<()> {
        fn fail(path: &str, msg: &str) -> Result<()> {
            Err(Error::InvalidConfig(format!("{path}: {msg}")))
        }
        if self.sites.is_empty() {
            return fail("sites", "must not be empty");
        }
        let mut dedup = self.sites.clone();
        dedup.sort();
        dedup.dedup();
        if dedup.len() != self.sites.len() {
            return fail("sites", "site identifiers must be unique");
        }
        if !self.sites.contains(&self.target_site) {
            return fail("target_site", "must be one of `sites`");
        }
        if self.loss_weights.lambda1 < 0.0 {
            return fail("loss_weights.lambda1", "must be >= 0");
        }
        if self.loss_weights.lambda2 < 0.0 {
            return fail("loss_weights.lambda2", "must be >= 0");
        }
        if self.loss_weights.lambda3 < 0.0 {
            return fail("loss_weights.lambda3", "must be >= 0");
        }
        if !(self.margin > 0.0) {
            return fail("margin", "must be > 0");
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-3) {
            return fail("epsilon", "must lie in (0, 1e-3]");
        }
        if self.neighborhood_radius == 0 {
            return fail("neighborhood_radius", "must be >= 1");
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return fail("optimizer.learning_rate", "must be > 0");
        }
        if !(self.optimizer.min_lr > 0.0)
            || self.optimizer.min_lr > self.optimizer.learning_rate
        {
            return fail("optimizer.min_lr", "must be in (0, learning_rate]");
        }
        if self.optimizer.schedule_step == Some(0) {
            return fail("optimizer.schedule_step", "must be >= 1 when set");
        }
        if self.epochs == 0 {
            return fail("epochs", "must be >= 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be >= 1");
        }
        if self.kernel.common_dim == 0 {
            return fail("kernel.common_dim", "must be >= 1");
        }
        if self.kernel.tap_layers.is_empty() {
            return fail("kernel.tap_layers", "must name at least one tap");
        }
        if !(self.logits.temperature > 0.0) {
            return fail("logits.temperature", "must be > 0");
        }
        if self.seg.gamma < 0.0 {
            return fail("seg.gamma", "must be >= 0");
        }
        if !(self.seg.smooth > 0.0) {
            return fail("seg.smooth", "must be > 0");
        }
        if self.data.samples_per_site == 0 {
            return fail("data.samples_per_site", "must be >= 1");
        }
        if self.data.image_size < 32 {
            return fail("data.image_size", "must be >= 32");
        }
        if !(self.data.teacher_fraction > 0.0 && self.data.teacher_fraction < 1.0) {
            return fail("data.teacher_fraction", "must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Parse JSON, apply `key=value` overrides addressed by dotted path, then
    /// validate. Override values are parsed as JSON first and fall back to
    /// strings, so `--set epochs=5` and `--set target_site=S2` both work.
    pub fn from_json_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for ov in overrides {
            let (path, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("--set `{ov}`: expected key=value")))?;
            let parsed: serde_json::Value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let mut cursor = &mut value;
            let parts: Vec<&str> = path.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let map = cursor.as_object_mut().ok_or_else(|| {
                    Error::InvalidConfig(format!("{path}: `{part}` is not an object field"))
                })?;
                if i + 1 == parts.len() {
                    map.insert(part.to_string(), parsed.clone());
                } else {
                    cursor = map
                        .entry(part.to_string())
                        .or_insert_with(|| serde_json::Value::Object(Default::default()));
                }
            }
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn json_round_trip() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_json(&cfg.to_json_pretty()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn negative_lambda_names_field() {
        let mut cfg = ExperimentConfig::default();
        cfg.loss_weights.lambda1 = -0.1;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("loss_weights.lambda1"), "{err}");
    }

    #[test]
    fn target_site_must_be_listed() {
        let mut cfg = ExperimentConfig::default();
        cfg.target_site = "S9".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn overrides_apply_by_dotted_path() {
        let base = ExperimentConfig::default().to_json_pretty();
        let cfg = ExperimentConfig::from_json_with_overrides(
            &base,
            &[
                "epochs=5".to_string(),
                "loss_weights.lambda2=0.5".to_string(),
                "target_site=S2".to_string(),
                "module_flags.use_kmm=false".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.loss_weights.lambda2, 0.5);
        assert_eq!(cfg.target_site, "S2");
        assert!(!cfg.module_flags.use_kmm);
    }

    #[test]
    fn bad_override_value_is_validation_error() {
        let base = ExperimentConfig::default().to_json_pretty();
        let err = ExperimentConfig::from_json_with_overrides(
            &base,
            &["loss_weights.lambda1=-2".to_string()],
        )
        .unwrap_err();
        assert!(err.to_string().contains("loss_weights.lambda1"), "{err}");
    }
}
