//! Model, parallelism and hardware configuration.
//!
//! All three config types are plain data with serde support. They are checked
//! through [`Validate`], which collects every violated invariant instead of
//! stopping at the first one, so a config file with several mistakes is
//! reported in a single pass.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activation::ActivationProfile;
use crate::storage::ThrottleSpec;

/// Transformer family. Encoder-decoder models split their layers so that
/// `floor(L / 2)` of them are decoders carrying cross-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelFamily {
    EncoderOnly,
    DecoderOnly,
    EncoderDecoder,
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelFamily::EncoderOnly => "encoder-only",
            ModelFamily::DecoderOnly => "decoder-only",
            ModelFamily::EncoderDecoder => "encoder-decoder",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub family: ModelFamily,
    pub hidden_dim: u64,
    pub num_layers: u64,
    pub num_heads: u64,
    pub head_dim: u64,
    /// Tokens per sequence.
    pub seq_len: u64,
    /// Samples per micro-batch.
    pub micro_batch: u64,
    /// Not reported by the evaluation this crate models; 50257 (GPT-2 BPE) is
    /// an assumption.
    pub vocab_size: u64,
    pub bytes_per_element: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::bert(12288, 3)
    }
}

impl ModelConfig {
    /// BERT-style encoder with head dimension 128, sequence length 1024,
    /// micro-batch 16 and FP16 storage.
    pub fn bert(hidden_dim: u64, num_layers: u64) -> Self {
        Self {
            family: ModelFamily::EncoderOnly,
            hidden_dim,
            num_layers,
            num_heads: (hidden_dim / 128).max(1),
            head_dim: 128,
            seq_len: 1024,
            micro_batch: 16,
            vocab_size: 50257,
            bytes_per_element: 2,
        }
    }

    pub fn with_micro_batch(mut self, micro_batch: u64) -> Self {
        self.micro_batch = micro_batch;
        self
    }

    pub fn with_layers(mut self, num_layers: u64) -> Self {
        self.num_layers = num_layers;
        self
    }

    pub fn decoder_layers(&self) -> u64 {
        match self.family {
            ModelFamily::EncoderDecoder => self.num_layers / 2,
            ModelFamily::DecoderOnly => self.num_layers,
            ModelFamily::EncoderOnly => 0,
        }
    }

    /// Layers that carry a cross-attention block.
    pub fn cross_attention_layers(&self) -> u64 {
        match self.family {
            ModelFamily::EncoderDecoder => self.num_layers / 2,
            _ => 0,
        }
    }

    pub fn tokens_per_microbatch(&self) -> u64 {
        self.seq_len * self.micro_batch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParallelismConfig {
    pub tp_degree: u64,
    pub pp_degree: u64,
    pub dp_degree: u64,
    pub zero_stage: u8,
    pub num_microbatches: u64,
}

impl Default for ParallelismConfig {
    fn default() -> Self {
        Self {
            tp_degree: 1,
            pp_degree: 1,
            dp_degree: 1,
            zero_stage: 0,
            num_microbatches: 1,
        }
    }
}

impl ParallelismConfig {
    pub fn tensor_parallel(tp_degree: u64) -> Self {
        Self {
            tp_degree,
            ..Self::default()
        }
    }

    pub fn gpus(&self) -> u64 {
        self.tp_degree * self.pp_degree * self.dp_degree
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HardwareConfig {
    /// Peak dense FP16 throughput, FLOP/s.
    pub gpu_flops: f64,
    /// Fraction of peak reached by GEMMs. Measured step times embed an
    /// unstated efficiency; 0.5 reproduces the measured 2-GPU bandwidths.
    pub gpu_flops_efficiency: f64,
    /// Device memory bandwidth, bytes/s.
    pub gpu_mem_bw: f64,
    pub gpu_mem_capacity: f64,
    /// SSDs dedicated to one GPU.
    pub ssd_count: u64,
    /// Sequential write bandwidth of one SSD, bytes/s.
    pub ssd_write_bw: f64,
    /// Vendor TBW rating of one SSD, bytes.
    pub ssd_rated_endurance: f64,
    pub jesd_waf: f64,
    pub actual_waf: f64,
    pub retention_relax_factor: f64,
    pub interconnect_bw: f64,
}

impl Default for HardwareConfig {
    /// A100 40GB PCIe with four 1 TB consumer NVMe drives (600 TBW, 5 GB/s).
    fn default() -> Self {
        Self {
            gpu_flops: 312e12,
            gpu_flops_efficiency: 0.5,
            gpu_mem_bw: 1.555e12,
            gpu_mem_capacity: 40.0 * 1024.0 * 1024.0 * 1024.0,
            ssd_count: 4,
            ssd_write_bw: 5.0e9,
            ssd_rated_endurance: 600e12,
            jesd_waf: 2.5,
            actual_waf: 1.0,
            retention_relax_factor: 86.0,
            interconnect_bw: 300e9,
        }
    }
}

impl HardwareConfig {
    pub fn effective_flops(&self) -> f64 {
        self.gpu_flops * self.gpu_flops_efficiency
    }

    pub fn aggregate_ssd_write_bw(&self) -> f64 {
        self.ssd_count as f64 * self.ssd_write_bw
    }
}

/// One violated invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldViolation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid configuration: {}", join_violations(.violations))]
pub struct InvalidConfig {
    pub violations: Vec<FieldViolation>,
}

fn join_violations(v: &[FieldViolation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl InvalidConfig {
    pub fn mentions(&self, field: &str) -> bool {
        self.violations.iter().any(|v| v.field == field)
    }
}

pub trait Validate: Sized {
    fn violations(&self) -> Vec<FieldViolation>;

    fn validate(self) -> Result<Self, InvalidConfig> {
        let violations = self.violations();
        if violations.is_empty() {
            Ok(self)
        } else {
            Err(InvalidConfig { violations })
        }
    }
}

#[derive(Default)]
struct Checker {
    out: Vec<FieldViolation>,
}

impl Checker {
    fn fail(&mut self, field: &str, message: impl Into<String>) {
        self.out.push(FieldViolation {
            field: field.to_string(),
            message: message.into(),
        });
    }

    fn at_least_one(&mut self, field: &str, value: u64) {
        if value < 1 {
            self.fail(field, format!("must be >= 1, got {value}"));
        }
    }

    fn positive(&mut self, field: &str, value: f64) {
        if !(value.is_finite() && value > 0.0) {
            self.fail(
                field,
                format!("must be a positive finite number, got {value}"),
            );
        }
    }

    fn non_negative(&mut self, field: &str, value: f64) {
        if !(value.is_finite() && value >= 0.0) {
            self.fail(field, format!("must be >= 0, got {value}"));
        }
    }
}

impl Validate for ModelConfig {
    fn violations(&self) -> Vec<FieldViolation> {
        let mut c = Checker::default();
        c.at_least_one("hidden_dim", self.hidden_dim);
        c.at_least_one("num_layers", self.num_layers);
        c.at_least_one("num_heads", self.num_heads);
        c.at_least_one("head_dim", self.head_dim);
        c.at_least_one("seq_len", self.seq_len);
        c.at_least_one("micro_batch", self.micro_batch);
        c.at_least_one("vocab_size", self.vocab_size);
        c.at_least_one("bytes_per_element", self.bytes_per_element);
        if self.num_heads.checked_mul(self.head_dim) != Some(self.hidden_dim) {
            c.fail(
                "hidden_dim",
                format!(
                    "hidden_dim {} != num_heads {} x head_dim {}",
                    self.hidden_dim, self.num_heads, self.head_dim
                ),
            );
        }
        if self.family == ModelFamily::EncoderDecoder && self.num_layers < 2 {
            c.fail(
                "num_layers",
                "encoder-decoder models need at least one encoder and one decoder layer",
            );
        }
        c.out
    }
}

impl Validate for ParallelismConfig {
    fn violations(&self) -> Vec<FieldViolation> {
        let mut c = Checker::default();
        c.at_least_one("tp_degree", self.tp_degree);
        c.at_least_one("pp_degree", self.pp_degree);
        c.at_least_one("dp_degree", self.dp_degree);
        c.at_least_one("num_microbatches", self.num_microbatches);
        if self.zero_stage > 3 {
            c.fail(
                "zero_stage",
                format!("must be one of 0, 1, 2, 3, got {}", self.zero_stage),
            );
        }
        c.out
    }
}

impl Validate for HardwareConfig {
    fn violations(&self) -> Vec<FieldViolation> {
        let mut c = Checker::default();
        c.positive("gpu_flops", self.gpu_flops);
        c.positive("gpu_mem_bw", self.gpu_mem_bw);
        c.positive("gpu_mem_capacity", self.gpu_mem_capacity);
        c.at_least_one("ssd_count", self.ssd_count);
        c.positive("ssd_write_bw", self.ssd_write_bw);
        c.positive("ssd_rated_endurance", self.ssd_rated_endurance);
        c.positive("retention_relax_factor", self.retention_relax_factor);
        c.positive("interconnect_bw", self.interconnect_bw);
        let eff = self.gpu_flops_efficiency;
        if !(eff > 0.0 && eff <= 1.0) {
            c.fail(
                "gpu_flops_efficiency",
                format!("must be in (0, 1], got {eff}"),
            );
        }
        if !(self.actual_waf >= 1.0) {
            c.fail(
                "actual_waf",
                format!("must be >= 1, got {}", self.actual_waf),
            );
        }
        if !(self.jesd_waf >= self.actual_waf) {
            c.fail(
                "jesd_waf",
                format!(
                    "must be >= actual_waf ({}), got {}",
                    self.actual_waf, self.jesd_waf
                ),
            );
        }
        c.out
    }
}

impl Validate for ActivationProfile {
    fn violations(&self) -> Vec<FieldViolation> {
        let mut c = Checker::default();
        c.non_negative("shared_coeff", self.shared_coeff);
        c.non_negative("sharded_coeff", self.sharded_coeff);
        c.non_negative("cross_attention_extra", self.cross_attention_extra);
        c.non_negative("attention_score_coeff", self.attention_score_coeff);
        c.out
    }
}

/// `[storage]` section: throttle parameters and an optional disk quota.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StorageSection {
    /// Aggregate write bandwidth. Defaults to `ssd_count * ssd_write_bw`.
    pub write_bw: Option<f64>,
    /// Aggregate read bandwidth. Defaults to the write bandwidth.
    pub read_bw: Option<f64>,
    pub fixed_latency: f64,
    pub quota_bytes: Option<u64>,
}

impl StorageSection {
    pub fn throttle(&self, hw: &HardwareConfig) -> ThrottleSpec {
        let write_bw = self.write_bw.unwrap_or_else(|| hw.aggregate_ssd_write_bw());
        ThrottleSpec {
            write_bw,
            read_bw: self.read_bw.unwrap_or(write_bw),
            fixed_latency: self.fixed_latency,
        }
    }
}

impl Validate for StorageSection {
    fn violations(&self) -> Vec<FieldViolation> {
        let mut c = Checker::default();
        if let Some(bw) = self.write_bw {
            c.positive("write_bw", bw);
        }
        if let Some(bw) = self.read_bw {
            c.positive("read_bw", bw);
        }
        c.non_negative("fixed_latency", self.fixed_latency);
        c.out
    }
}

/// `[plan]` section: overrides for the offload planner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanSection {
    pub budget_bytes: Option<u64>,
    pub min_tensor_elems: Option<u64>,
    pub keep_last_module: bool,
    pub prefetch_depth: Option<usize>,
}

impl Default for PlanSection {
    fn default() -> Self {
        Self {
            budget_bytes: None,
            min_tensor_elems: None,
            keep_last_module: true,
            prefetch_depth: None,
        }
    }
}

/// A whole configuration file: `[model]`, `[parallelism]`, `[hardware]`,
/// plus the optional `[activation_profile]`, `[storage]` and `[plan]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub model: ModelConfig,
    pub parallelism: ParallelismConfig,
    pub hardware: HardwareConfig,
    pub activation_profile: ActivationProfile,
    pub storage: StorageSection,
    pub plan: PlanSection,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse configuration: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Invalid(#[from] InvalidConfig),
}

fn prefixed(section: &str, v: Vec<FieldViolation>) -> impl Iterator<Item = FieldViolation> + '_ {
    v.into_iter().map(move |mut fv| {
        fv.field = format!("{section}.{}", fv.field);
        fv
    })
}

impl Validate for ConfigFile {
    fn violations(&self) -> Vec<FieldViolation> {
        let mut out = Vec::new();
        out.extend(prefixed("model", self.model.violations()));
        out.extend(prefixed("parallelism", self.parallelism.violations()));
        out.extend(prefixed("hardware", self.hardware.violations()));
        out.extend(prefixed(
            "activation_profile",
            self.activation_profile.violations(),
        ));
        out.extend(prefixed("storage", self.storage.violations()));
        out
    }
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: ConfigFile = toml::from_str(text)?;
        Ok(cfg.validate()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }
}
