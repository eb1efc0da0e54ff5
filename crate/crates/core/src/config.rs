//! Run configuration file: TOML sections {model, data, scoring, masking,
//! training, eval}. Every key has a documented default, unknown keys are
//! rejected, and an empty file resolves to the complete default config.

use crate::data::SyntheticLangSpec;
use crate::error::{Error, Result};
use crate::importance::ScoringMethod;
use crate::masking::{Granularity, MaskSpec};
use crate::model::ModelConfig;
use crate::tensor::Precision;
use crate::trainer::{Method, OptimKind, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

fn d_n_layers() -> usize {
    2
}
fn d_d_model() -> usize {
    64
}
fn d_n_heads() -> usize {
    4
}
fn d_d_ff() -> usize {
    128
}
fn d_vocab_size() -> usize {
    256
}
fn d_max_seq_len() -> usize {
    128
}
fn d_precision() -> Precision {
    Precision::Single
}
fn d_init_seed() -> u64 {
    7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "d_n_layers")]
    pub n_layers: usize,
    #[serde(default = "d_d_model")]
    pub d_model: usize,
    #[serde(default = "d_n_heads")]
    pub n_heads: usize,
    #[serde(default = "d_d_ff")]
    pub d_ff: usize,
    #[serde(default = "d_vocab_size")]
    pub vocab_size: usize,
    #[serde(default = "d_max_seq_len")]
    pub max_seq_len: usize,
    #[serde(default = "d_precision")]
    pub precision: Precision,
    #[serde(default = "d_init_seed")]
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

fn d_train_tokens() -> usize {
    200_000
}
fn d_eval_corpus_tokens() -> usize {
    100_000
}
fn d_source_seed() -> u64 {
    11
}
fn d_target_seed() -> u64 {
    12
}
fn d_num_classes() -> usize {
    16
}
fn d_members_per_class() -> usize {
    16
}
fn d_exclusive_members() -> usize {
    6
}
fn d_exclusive_mass() -> f64 {
    0.6
}
fn d_class_branching() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default = "d_train_tokens")]
    pub train_tokens: usize,
    #[serde(default = "d_eval_corpus_tokens")]
    pub eval_tokens: usize,
    #[serde(default = "d_source_seed")]
    pub source_seed: u64,
    #[serde(default = "d_target_seed")]
    pub target_seed: u64,
    #[serde(default = "d_num_classes")]
    pub num_classes: usize,
    #[serde(default = "d_members_per_class")]
    pub members_per_class: usize,
    #[serde(default = "d_exclusive_members")]
    pub exclusive_members: usize,
    #[serde(default = "d_exclusive_mass")]
    pub exclusive_mass: f64,
    #[serde(default = "d_class_branching")]
    pub class_branching: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

fn d_method() -> String {
    "wanda".to_string()
}
fn d_calib_samples() -> usize {
    64
}
fn d_calib_seq_len() -> usize {
    128
}
fn d_calib_seed() -> u64 {
    500
}
fn d_random_seed() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringSection {
    /// wanda | magnitude | random | sparsegpt | fim
    #[serde(default = "d_method")]
    pub method: String,
    #[serde(default = "d_calib_samples")]
    pub calib_samples: usize,
    #[serde(default = "d_calib_seq_len")]
    pub calib_seq_len: usize,
    #[serde(default = "d_calib_seed")]
    pub calib_seed: u64,
    /// Only used with method = "random".
    #[serde(default = "d_random_seed")]
    pub random_seed: u64,
}

impl Default for ScoringSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

fn d_ratio() -> f64 {
    0.5
}
fn d_granularity() -> Granularity {
    Granularity::Column
}
fn d_hft_seed() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskingSection {
    #[serde(default = "d_ratio")]
    pub ratio: f64,
    #[serde(default = "d_granularity")]
    pub granularity: Granularity,
    #[serde(default = "d_hft_seed")]
    pub hft_seed: u64,
}

impl Default for MaskingSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

fn d_train_method() -> Method {
    Method::Ssu
}
fn d_total_steps() -> usize {
    2000
}
fn d_batch() -> usize {
    16
}
fn d_seq_len() -> usize {
    64
}
fn d_peak_lr() -> f64 {
    5e-4
}
fn d_warmup_fraction() -> f64 {
    0.05
}
fn d_weight_decay() -> f64 {
    0.01
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_epsilon() -> f64 {
    1e-8
}
fn d_grad_clip_norm() -> f64 {
    1.0
}
fn d_seed() -> u64 {
    0
}
fn d_optimizer() -> OptimKind {
    OptimKind::AdamW
}
fn d_eval_interval() -> usize {
    500
}
fn d_eval_tokens() -> usize {
    50_000
}
fn d_pretrain_steps() -> usize {
    2000
}
fn d_pretrain_seed() -> u64 {
    42
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default = "d_train_method")]
    pub method: Method,
    #[serde(default = "d_total_steps")]
    pub total_steps: usize,
    #[serde(default = "d_batch")]
    pub batch: usize,
    #[serde(default = "d_seq_len")]
    pub seq_len: usize,
    #[serde(default = "d_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "d_warmup_fraction")]
    pub warmup_fraction: f64,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_epsilon")]
    pub epsilon: f64,
    #[serde(default = "d_grad_clip_norm")]
    pub grad_clip_norm: f64,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_optimizer")]
    pub optimizer: OptimKind,
    /// Present only with method = "gmt"; resolved to 0.5 when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gmt_drop_ratio: Option<f64>,
    /// Present only with method = "gmt"; resolved to 4 when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gmt_interval: Option<usize>,
    #[serde(default = "d_eval_interval")]
    pub eval_interval: usize,
    #[serde(default = "d_eval_tokens")]
    pub eval_tokens: usize,
    #[serde(default = "d_pretrain_steps")]
    pub pretrain_steps: usize,
    #[serde(default = "d_pretrain_seed")]
    pub pretrain_seed: u64,
    #[serde(default)]
    pub pin_embed_head: bool,
    #[serde(default)]
    pub debug_checks: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

fn d_eval_seq_len() -> usize {
    64
}
fn d_eval_max_tokens() -> usize {
    100_000
}
fn d_ratios() -> Vec<f64> {
    vec![0.0, 0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "d_eval_seq_len")]
    pub seq_len: usize,
    #[serde(default = "d_eval_max_tokens")]
    pub max_tokens: usize,
    /// Freezing-ratio grid for the sweep.
    #[serde(default = "d_ratios")]
    pub ratios: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

/// The whole run configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub scoring: ScoringSection,
    #[serde(default)]
    pub masking: MaskingSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl RunConfigFile {
    /// Parse a TOML config file; syntax and unknown-key errors carry the
    /// file position.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.model.n_layers,
            d_model: self.model.d_model,
            n_heads: self.model.n_heads,
            d_ff: self.model.d_ff,
            vocab_size: self.model.vocab_size,
            max_seq_len: self.model.max_seq_len,
            precision: self.model.precision,
            init_seed: self.model.init_seed,
        }
    }

    pub fn lang_pair(&self) -> (SyntheticLangSpec, SyntheticLangSpec) {
        crate::data::default_lang_pair(
            self.model.vocab_size,
            self.data.num_classes,
            self.data.members_per_class,
            self.data.exclusive_members,
            self.data.exclusive_mass,
            self.data.class_branching,
            self.data.source_seed,
            self.data.target_seed,
        )
    }

    pub fn scoring_method(&self) -> Result<ScoringMethod> {
        match self.scoring.method.as_str() {
            "wanda" => Ok(ScoringMethod::Wanda),
            "magnitude" => Ok(ScoringMethod::Magnitude),
            "random" => Ok(ScoringMethod::Random {
                seed: self.scoring.random_seed,
            }),
            "sparsegpt" => Ok(ScoringMethod::SparseGpt),
            "fim" => Ok(ScoringMethod::Fim),
            other => Err(Error::InvalidConfig(format!(
                "scoring.method {other} not one of wanda|magnitude|random|sparsegpt|fim"
            ))),
        }
    }

    pub fn mask_spec(&self) -> MaskSpec {
        MaskSpec {
            ratio: self.masking.ratio,
            granularity: self.masking.granularity,
            method: self.scoring.method.clone(),
        }
    }

    /// The CPT TrainConfig (gmt fields resolved to defaults when omitted).
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            method: t.method,
            total_steps: t.total_steps,
            batch: t.batch,
            seq_len: t.seq_len,
            peak_lr: t.peak_lr,
            warmup_fraction: t.warmup_fraction,
            weight_decay: t.weight_decay,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            grad_clip_norm: t.grad_clip_norm,
            seed: t.seed,
            optimizer: t.optimizer,
            gmt_drop_ratio: t.gmt_drop_ratio.unwrap_or(0.5),
            gmt_interval: t.gmt_interval.unwrap_or(4),
            eval_interval: t.eval_interval,
            eval_tokens: t.eval_tokens,
            pin_embed_head: t.pin_embed_head,
            debug_checks: t.debug_checks,
            precision: self.model.precision,
        }
    }

    /// Source pre-training config (full fine-tuning on the source corpus).
    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            method: Method::Fft,
            total_steps: self.training.pretrain_steps,
            seed: self.training.pretrain_seed,
            ..self.train_config()
        }
    }

    /// Validate everything, reporting every violation rather than the first,
    /// plus notices about resolved defaults.
    pub fn validate(&self) -> (Vec<String>, Vec<String>) {
        let mut errors = Vec::new();
        let mut notices = Vec::new();

        if let Err(Error::ConfigViolations(v)) = self.model_config().validate() {
            errors.extend(v);
        }

        let d = &self.data;
        if d.num_classes * d.members_per_class > self.model.vocab_size {
            errors.push(format!(
                "data: {} classes x {} members exceeds model.vocab_size {}",
                d.num_classes, d.members_per_class, self.model.vocab_size
            ));
        }
        if d.exclusive_members == 0 || 2 * d.exclusive_members >= d.members_per_class {
            errors.push(format!(
                "data.exclusive_members {} must be in [1, members_per_class/2)",
                d.exclusive_members
            ));
        }
        if !(d.exclusive_mass > 0.0 && d.exclusive_mass < 1.0) {
            errors.push(format!("data.exclusive_mass {} out of (0,1)", d.exclusive_mass));
        }
        if d.class_branching < 2 || d.class_branching > d.num_classes {
            errors.push(format!(
                "data.class_branching {} must be in [2, num_classes]",
                d.class_branching
            ));
        }
        if d.train_tokens < 10_000 {
            errors.push(format!(
                "data.train_tokens {} too small (need >= 10000 for the distinguishability check)",
                d.train_tokens
            ));
        }
        if d.train_tokens < self.training.batch * self.training.seq_len {
            errors.push("data.train_tokens smaller than one training batch".into());
        }

        let s = &self.scoring;
        if self.scoring_method().is_err() {
            errors.push(format!(
                "scoring.method {} not one of wanda|magnitude|random|sparsegpt|fim",
                s.method
            ));
        }
        if s.calib_samples == 0 {
            errors.push("scoring.calib_samples must be >= 1".into());
        }
        if s.calib_seq_len < 2 || s.calib_seq_len > self.model.max_seq_len {
            errors.push(format!(
                "scoring.calib_seq_len {} must be in [2, model.max_seq_len]",
                s.calib_seq_len
            ));
        }

        if !(0.0..=1.0).contains(&self.masking.ratio) {
            errors.push(format!("masking.ratio {} out of [0,1]", self.masking.ratio));
        }

        let t = &self.training;
        if let Err(Error::ConfigViolations(v)) = self.train_config().validate() {
            errors.extend(v);
        }
        if t.seq_len > self.model.max_seq_len || t.seq_len < 2 {
            errors.push(format!(
                "training.seq_len {} must be in [2, model.max_seq_len {}]",
                t.seq_len, self.model.max_seq_len
            ));
        }
        if t.method == Method::Gmt {
            if t.gmt_interval.is_none() {
                notices.push("training.gmt_interval not set; resolved to default 4".into());
            }
            if t.gmt_drop_ratio.is_none() {
                notices.push("training.gmt_drop_ratio not set; resolved to default 0.5".into());
            }
        } else {
            if t.gmt_interval.is_some() {
                errors.push("training.gmt_interval set but training.method is not gmt".into());
            }
            if t.gmt_drop_ratio.is_some() {
                errors.push("training.gmt_drop_ratio set but training.method is not gmt".into());
            }
        }
        if t.pretrain_steps == 0 {
            errors.push("training.pretrain_steps must be >= 1".into());
        }

        let e = &self.eval;
        if e.seq_len < 2 || e.seq_len > self.model.max_seq_len {
            errors.push(format!(
                "eval.seq_len {} must be in [2, model.max_seq_len {}]",
                e.seq_len, self.model.max_seq_len
            ));
        }
        if e.max_tokens < e.seq_len {
            errors.push("eval.max_tokens smaller than one window".into());
        }
        for r in &e.ratios {
            if !(0.0..=1.0).contains(r) {
                errors.push(format!("eval.ratios entry {r} out of [0,1]"));
            }
        }

        (errors, notices)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_yields_complete_defaults() {
        let cfg = RunConfigFile::parse("").unwrap();
        assert_eq!(cfg, RunConfigFile::default());
        assert_eq!(cfg.model.d_model, 64);
        assert_eq!(cfg.training.total_steps, 2000);
        assert_eq!(cfg.eval.ratios.len(), 8);
        let (errors, _) = cfg.validate();
        assert!(errors.is_empty(), "{errors:?}");
        // the echoed default config parses back to itself
        let echoed = cfg.to_toml();
        assert_eq!(RunConfigFile::parse(&echoed).unwrap(), cfg);
    }

    #[test]
    fn parse_serialize_roundtrip() {
        let text = r#"
[model]
d_model = 32
precision = "double"

[training]
method = "gmt"
gmt_interval = 8
total_steps = 100
"#;
        let cfg = RunConfigFile::parse(text).unwrap();
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.training.gmt_interval, Some(8));
        let back = RunConfigFile::parse(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected_with_position() {
        let err = RunConfigFile::parse("[model]\nd_modle = 64\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("d_modle"), "{msg}");
        assert!(msg.contains("line"), "no line info: {msg}");
    }

    #[test]
    fn ratio_out_of_range_reported() {
        let cfg = RunConfigFile::parse("[masking]\nratio = 1.3\n").unwrap();
        let (errors, _) = cfg.validate();
        assert!(errors.iter().any(|e| e.contains("ratio") && e.contains("out of [0,1]")), "{errors:?}");
    }

    #[test]
    fn gmt_defaults_resolved_with_notice() {
        let cfg = RunConfigFile::parse("[training]\nmethod = \"gmt\"\n").unwrap();
        let (errors, notices) = cfg.validate();
        assert!(errors.is_empty(), "{errors:?}");
        assert!(notices.iter().any(|n| n.contains("gmt_interval") && n.contains("4")));
        assert_eq!(cfg.train_config().gmt_interval, 4);
    }

    #[test]
    fn gmt_fields_rejected_for_other_methods() {
        let cfg = RunConfigFile::parse("[training]\nmethod = \"ssu\"\ngmt_interval = 4\n").unwrap();
        let (errors, _) = cfg.validate();
        assert!(errors.iter().any(|e| e.contains("gmt_interval")), "{errors:?}");
    }

    #[test]
    fn all_violations_reported_not_just_first() {
        let text = r#"
[model]
vocab_size = 1
[masking]
ratio = 1.3
[training]
peak_lr = 0.0
"#;
        let cfg = RunConfigFile::parse(text).unwrap();
        let (errors, _) = cfg.validate();
        assert!(errors.len() >= 3, "{errors:?}");
        assert!(errors.iter().any(|e| e.contains("vocab_size")));
        assert!(errors.iter().any(|e| e.contains("ratio")));
        assert!(errors.iter().any(|e| e.contains("peak_lr")));
    }

    #[test]
    fn default_sweep_grid_mirrors_eighths() {
        let cfg = RunConfigFile::default();
        let expect: Vec<f64> = (0..8).map(|i| i as f64 * 0.125).collect();
        assert_eq!(cfg.eval.ratios, expect);
    }
}
