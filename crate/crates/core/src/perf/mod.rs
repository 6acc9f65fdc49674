//! Analytical step-time, bandwidth and SSD lifespan projections.
//!
//! The forward pass of each transformer layer is modeled as a pipeline over
//! its ops: each op is bound by either its arithmetic or its memory traffic,
//! and the layer as a whole is bound by the larger of the summed op times
//! and any ZeRO weight-gather traffic overlapped with it.

mod scaling;
mod scenarios;
mod upscale;

pub use scaling::{scaling_exponent_fit, synthetic_sweep, ScalingQuantity};
pub use scenarios::{projection_scenarios, Scenario};
pub use upscale::{
    scaled_inputs, upscale_bandwidth_projection, GrowthPolicy, ScaleStep, UpscalePoint,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activation::{
    activations_per_layer, activations_per_step, param_count, ActivationProfile,
};
use crate::config::{HardwareConfig, ModelConfig, ParallelismConfig};
use crate::layer::model_layers;

pub const SECONDS_PER_YEAR: f64 = 365.25 * 24.0 * 3600.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostKind {
    Compute,
    /// Timed against `interconnect_bw`; `flops` is ignored.
    Communication,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub kind: CostKind,
    pub flops: f64,
    pub bytes_moved: f64,
}

impl LayerCost {
    pub fn new(kind: CostKind, flops: f64, bytes_moved: f64) -> Self {
        Self {
            kind,
            flops,
            bytes_moved,
        }
    }

    pub fn compute(flops: f64, bytes_moved: f64) -> Self {
        Self::new(CostKind::Compute, flops, bytes_moved)
    }

    /// Time this op takes on its own.
    pub fn time(&self, hw: &HardwareConfig) -> f64 {
        match self.kind {
            CostKind::Compute => {
                (self.flops / hw.effective_flops()).max(self.bytes_moved / hw.gpu_mem_bw)
            }
            CostKind::Communication => self.bytes_moved / hw.interconnect_bw,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PerfError {
    #[error("cost list is empty")]
    EmptyCostList,
    #[error("step time must be positive, got {0}")]
    NonPositiveStepTime(f64),
    #[error("need at least {min} layers, got {got}")]
    TooFewLayers { min: u64, got: u64 },
    #[error("degenerate sweep: {0}")]
    DegenerateSweep(String),
    #[error("growth policy has no entry for {0} GPUs")]
    UnknownScale(u64),
}

pub fn transformer_layer_time(
    costs: &[LayerCost],
    zero_comm_time: f64,
    hw: &HardwareConfig,
) -> Result<f64, PerfError> {
    if costs.is_empty() {
        return Err(PerfError::EmptyCostList);
    }
    let inner: f64 = costs.iter().map(|c| c.time(hw)).sum();
    Ok(inner.max(zero_comm_time))
}

pub fn required_write_bandwidth(activations_bytes: f64, step_time: f64) -> Result<f64, PerfError> {
    if !(step_time > 0.0) {
        return Err(PerfError::NonPositiveStepTime(step_time));
    }
    Ok(activations_bytes / (step_time / 2.0))
}

/// Host bytes the drive set can absorb over its life.
pub fn effective_endurance(hw: &HardwareConfig) -> f64 {
    hw.ssd_count as f64
        * hw.ssd_rated_endurance
        * (hw.jesd_waf / hw.actual_waf)
        * hw.retention_relax_factor
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Lifespan {
    Finite(f64),
    Unbounded,
}

impl Lifespan {
    pub fn seconds(&self) -> Option<f64> {
        match self {
            Lifespan::Finite(s) => Some(*s),
            Lifespan::Unbounded => None,
        }
    }

    pub fn years(&self) -> Option<f64> {
        self.seconds().map(|s| s / SECONDS_PER_YEAR)
    }

    /// `true` when the lifespan exceeds `years` (always true if unbounded).
    pub fn exceeds_years(&self, years: f64) -> bool {
        self.years().is_none_or(|y| y > years)
    }
}

pub fn projected_lifespan(
    hw: &HardwareConfig,
    activations_per_step: f64,
    step_time: f64,
) -> Result<Lifespan, PerfError> {
    if !(step_time > 0.0) {
        return Err(PerfError::NonPositiveStepTime(step_time));
    }
    if activations_per_step <= 0.0 {
        return Ok(Lifespan::Unbounded);
    }
    Ok(Lifespan::Finite(
        effective_endurance(hw) * step_time / activations_per_step,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaxActivations {
    pub total: f64,
    /// Two consecutive layers of one micro-batch stay on the device.
    pub resident: f64,
    pub offloadable: f64,
}

pub fn max_activations_per_gpu(
    model: &ModelConfig,
    par: &ParallelismConfig,
    profile: &ActivationProfile,
) -> Result<MaxActivations, PerfError> {
    if model.num_layers < 2 {
        return Err(PerfError::TooFewLayers {
            min: 2,
            got: model.num_layers,
        });
    }
    let total = activations_per_step(model, par, profile);
    let widest = activations_per_layer(model, par, profile, model.cross_attention_layers() > 0);
    let resident = (2.0 * widest).min(total);
    Ok(MaxActivations {
        total,
        resident,
        offloadable: total - resident,
    })
}

/// Per-layer weight all-gather time under ZeRO stage 3; zero otherwise.
pub fn zero_comm_time(model: &ModelConfig, par: &ParallelismConfig, hw: &HardwareConfig) -> f64 {
    if par.zero_stage < 3 || par.dp_degree < 2 {
        return 0.0;
    }
    let h = model.hidden_dim as f64;
    let dp = par.dp_degree as f64;
    let layer_weight_bytes = 12.0 * h * h * model.bytes_per_element as f64 / par.tp_degree as f64;
    layer_weight_bytes * (dp - 1.0) / dp / hw.interconnect_bw
}

/// Everything needed to evaluate one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioInputs {
    pub model: ModelConfig,
    pub parallelism: ParallelismConfig,
    pub profile: ActivationProfile,
    pub hardware: HardwareConfig,
}

impl ScenarioInputs {
    /// Forward time of one micro-batch through one pipeline stage.
    pub fn stage_forward_time(&self) -> Result<f64, PerfError> {
        let zc = zero_comm_time(&self.model, &self.parallelism, &self.hardware);
        let mut total = 0.0;
        for (ops, count) in model_layers(&self.model, &self.parallelism, &self.profile) {
            let costs: Vec<LayerCost> = ops.iter().map(|o| o.cost).collect();
            total += count as f64 * transformer_layer_time(&costs, zc, &self.hardware)?;
        }
        if total <= 0.0 {
            return Err(PerfError::NonPositiveStepTime(total));
        }
        Ok(total / self.parallelism.pp_degree as f64)
    }

    pub fn project(&self) -> Result<Projection, PerfError> {
        let par = &self.parallelism;
        let stage = self.stage_forward_time()?;
        let nmb = par.num_microbatches as f64;
        let forward_time = nmb * stage;
        // backward costs twice the forward; the pipeline fill and drain add
        // pp - 1 micro-batch slots
        let step_time = 3.0 * (nmb + par.pp_degree as f64 - 1.0) * stage;
        let acts = activations_per_step(&self.model, par, &self.profile);
        let max_act = max_activations_per_gpu(&self.model, par, &self.profile)
            .map(|m| m.offloadable)
            .unwrap_or(0.0);
        Ok(Projection {
            step_time,
            forward_time,
            required_write_bw_per_gpu: required_write_bandwidth(acts, step_time)?,
            activations_per_gpu: acts,
            projected_lifespan: projected_lifespan(&self.hardware, acts, step_time)?,
            max_activations_per_gpu: max_act,
        })
    }

    /// Weight-update cost: read weights, read gradients, write weights.
    pub fn weight_update_time(&self) -> f64 {
        let par = &self.parallelism;
        let shard = (par.tp_degree * par.pp_degree) as f64;
        let weight_bytes = param_count(&self.model) * self.model.bytes_per_element as f64 / shard;
        3.0 * weight_bytes / self.hardware.gpu_mem_bw
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub step_time: f64,
    pub forward_time: f64,
    pub required_write_bw_per_gpu: f64,
    pub activations_per_gpu: f64,
    pub projected_lifespan: Lifespan,
    pub max_activations_per_gpu: f64,
}
