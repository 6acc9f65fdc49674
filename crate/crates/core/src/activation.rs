//! Closed-form activation-memory model.
//!
//! Per layer and per micro-batch, the bytes saved for backward are
//! `s * b * h * (shared + sharded / t) * p / 2`, where `shared` counts
//! tensors replicated across tensor-parallel ranks and `sharded` those split
//! by them. The default coefficients (10 and 24) correspond to FP16 training
//! with a fused attention kernel. Without the fused kernel the attention
//! score matrices add a term quadratic in sequence length.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ModelConfig, ParallelismConfig};

/// Activation coefficients in bytes per `s * b * h` at FP16. Other element
/// widths scale them by `bytes_per_element / 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActivationProfile {
    pub shared_coeff: f64,
    pub sharded_coeff: f64,
    /// Extra sharded coefficient for decoder layers with cross-attention.
    pub cross_attention_extra: f64,
    /// Coefficient of the `a * s / h` score term, used when
    /// `flash_attention` is false.
    pub attention_score_coeff: f64,
    pub flash_attention: bool,
}

impl Default for ActivationProfile {
    fn default() -> Self {
        Self {
            shared_coeff: 10.0,
            sharded_coeff: 24.0,
            cross_attention_extra: 24.0,
            attention_score_coeff: 5.0,
            flash_attention: true,
        }
    }
}

impl ActivationProfile {
    /// Profile with sequence parallelism: the layer-norm and dropout tensors
    /// are split across tensor-parallel ranks too, so every coefficient is
    /// sharded.
    pub fn sequence_parallel() -> Self {
        let d = Self::default();
        Self {
            shared_coeff: 0.0,
            sharded_coeff: d.shared_coeff + d.sharded_coeff,
            ..d
        }
    }

    /// Effective coefficient per `s * b * h` for one layer.
    pub fn layer_coeff(&self, model: &ModelConfig, tp: u64, cross_attention: bool) -> f64 {
        let t = tp as f64;
        let mut c = self.shared_coeff + self.sharded_coeff / t;
        if !self.flash_attention {
            c += self.attention_score_coeff * model.num_heads as f64 * model.seq_len as f64
                / model.hidden_dim as f64
                / t;
        }
        if cross_attention {
            c += self.cross_attention_extra / t;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ActivationError {
    #[error("checkpointing needs at least {min} layers, got {got}")]
    TooFewLayers { min: u64, got: u64 },
}

fn sbh(model: &ModelConfig) -> f64 {
    model.seq_len as f64 * model.micro_batch as f64 * model.hidden_dim as f64
}

fn byte_scale(model: &ModelConfig) -> f64 {
    model.bytes_per_element as f64 / 2.0
}

/// Bytes saved by one layer for one micro-batch on one GPU.
pub fn activations_per_layer(
    model: &ModelConfig,
    par: &ParallelismConfig,
    profile: &ActivationProfile,
    cross_attention: bool,
) -> f64 {
    sbh(model) * profile.layer_coeff(model, par.tp_degree, cross_attention) * byte_scale(model)
}

/// Bytes saved over one training step on one GPU: the layers of one
/// pipeline stage, times the micro-batches in flight.
pub fn activations_per_step(
    model: &ModelConfig,
    par: &ParallelismConfig,
    profile: &ActivationProfile,
) -> f64 {
    let cross = model.cross_attention_layers() as f64;
    let plain = model.num_layers as f64 - cross;
    let per_mb = plain * activations_per_layer(model, par, profile, false)
        + cross * activations_per_layer(model, par, profile, true);
    per_mb * par.num_microbatches as f64 / par.pp_degree as f64
}

/// Parameter count: `12 * L * h^2` for the transformer layers plus a tied
/// embedding and output head of `2 * vocab * h`.
pub fn param_count(model: &ModelConfig) -> f64 {
    let h = model.hidden_dim as f64;
    12.0 * model.num_layers as f64 * h * h + 2.0 * model.vocab_size as f64 * h
}

/// Algorithmic FLOPs for forward plus backward over one step.
pub fn flops_per_step(model: &ModelConfig, par: &ParallelismConfig) -> f64 {
    3.0 * forward_flops_per_step(model, par)
}

pub fn forward_flops_per_step(model: &ModelConfig, par: &ParallelismConfig) -> f64 {
    let tokens = model.tokens_per_microbatch() as f64 * par.num_microbatches as f64;
    2.0 * param_count(model) * tokens
}

/// Activation footprint with full layer recomputation: every layer keeps its
/// input, and one layer is rematerialized at a time during backward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointedActivations {
    pub boundary_bytes: f64,
    pub recompute_bytes: f64,
}

impl CheckpointedActivations {
    pub fn total(&self) -> f64 {
        self.boundary_bytes + self.recompute_bytes
    }
}

pub fn checkpointed_activations(
    model: &ModelConfig,
    par: &ParallelismConfig,
    profile: &ActivationProfile,
) -> Result<CheckpointedActivations, ActivationError> {
    if model.num_layers < 1 {
        return Err(ActivationError::TooFewLayers {
            min: 1,
            got: model.num_layers,
        });
    }
    let layers = model.num_layers as f64 / par.pp_degree as f64;
    let nmb = par.num_microbatches as f64;
    let boundary =
        layers * nmb * sbh(model) * model.bytes_per_element as f64 / par.tp_degree as f64;
    let widest = activations_per_layer(model, par, profile, model.cross_attention_layers() > 0);
    Ok(CheckpointedActivations {
        boundary_bytes: boundary,
        recompute_bytes: widest,
    })
}

/// Asymptotic checkpointed footprint, `sqrt(L) * h * tokens`, used by the
/// scaling study. Constant factors are dropped.
pub fn checkpointed_asymptotic(num_layers: f64, hidden_dim: f64, tokens: f64) -> f64 {
    num_layers.sqrt() * hidden_dim * tokens
}
