//! Per-GPU write bandwidth as a training job grows across more GPUs.
//!
//! A [`GrowthPolicy`] maps each GPU count to a parallelism layout. Pipeline
//! growth is weak scaling in depth: each stage keeps the base model's layers,
//! so the model gains `L` layers per extra stage. Data-parallel growth adds
//! replicas and leaves the per-GPU workload alone.

use serde::{Deserialize, Serialize};

use super::{PerfError, ScenarioInputs};
use crate::activation::ActivationProfile;
use crate::config::ParallelismConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleStep {
    pub gpus: u64,
    pub tp_degree: u64,
    pub pp_degree: u64,
    pub dp_degree: u64,
    pub zero_stage: u8,
    /// Shard layer-norm and dropout activations across the TP group too.
    pub sequence_parallel: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthPolicy {
    pub steps: Vec<ScaleStep>,
}

fn base_step(base: &ParallelismConfig) -> ScaleStep {
    ScaleStep {
        gpus: base.gpus(),
        tp_degree: base.tp_degree,
        pp_degree: base.pp_degree,
        dp_degree: base.dp_degree,
        zero_stage: base.zero_stage,
        sequence_parallel: false,
    }
}

impl GrowthPolicy {
    pub fn from_steps(steps: Vec<ScaleStep>) -> Self {
        Self { steps }
    }

    /// Common practice at scale: widen tensor parallelism up to `max_tp`
    /// (with sequence parallelism once TP grows), then pipeline stages up to
    /// `max_pp`, then data parallelism. Counts that are not a multiple of the
    /// base GPU count are skipped.
    pub fn typical(base: &ParallelismConfig, gpu_counts: &[u64], max_tp: u64, max_pp: u64) -> Self {
        let start = base_step(base);
        let steps = gpu_counts
            .iter()
            .filter(|&&g| g >= start.gpus && g % start.gpus == 0)
            .map(|&g| {
                let mut s = start;
                s.gpus = g;
                let mut rest = g / start.gpus;
                while rest.is_multiple_of(2) && s.tp_degree * 2 <= max_tp {
                    s.tp_degree *= 2;
                    rest /= 2;
                }
                while rest.is_multiple_of(2) && s.pp_degree * 2 <= max_pp {
                    s.pp_degree *= 2;
                    rest /= 2;
                }
                s.dp_degree *= rest;
                s.sequence_parallel = s.tp_degree > start.tp_degree;
                s
            })
            .collect();
        Self { steps }
    }

    /// Replicas only.
    pub fn data_parallel_only(base: &ParallelismConfig, gpu_counts: &[u64]) -> Self {
        let start = base_step(base);
        let steps = gpu_counts
            .iter()
            .filter(|&&g| g >= start.gpus && g % start.gpus == 0)
            .map(|&g| ScaleStep {
                gpus: g,
                dp_degree: start.dp_degree * g / start.gpus,
                ..start
            })
            .collect();
        Self { steps }
    }

    pub fn step_for(&self, gpus: u64) -> Option<&ScaleStep> {
        self.steps.iter().find(|s| s.gpus == gpus)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpscalePoint {
    pub step: ScaleStep,
    pub step_time: f64,
    pub required_bw_per_gpu: f64,
}

/// Inputs for `base` grown to the layout in `step`.
pub fn scaled_inputs(base: &ScenarioInputs, step: &ScaleStep) -> ScenarioInputs {
    let bp = &base.parallelism;
    let mut model = base.model.clone();
    model.num_layers = base.model.num_layers * step.pp_degree / bp.pp_degree.max(1);
    let profile = if step.sequence_parallel {
        ActivationProfile {
            shared_coeff: 0.0,
            sharded_coeff: base.profile.shared_coeff + base.profile.sharded_coeff,
            ..base.profile.clone()
        }
    } else {
        base.profile.clone()
    };
    ScenarioInputs {
        model,
        parallelism: ParallelismConfig {
            tp_degree: step.tp_degree,
            pp_degree: step.pp_degree,
            dp_degree: step.dp_degree,
            zero_stage: step.zero_stage,
            num_microbatches: bp.num_microbatches,
        },
        profile,
        hardware: base.hardware.clone(),
    }
}

pub fn upscale_bandwidth_projection(
    base: &ScenarioInputs,
    policy: &GrowthPolicy,
    gpu_counts: &[u64],
) -> Result<Vec<UpscalePoint>, PerfError> {
    gpu_counts
        .iter()
        .map(|&g| {
            let step = policy.step_for(g).ok_or(PerfError::UnknownScale(g))?;
            let p = scaled_inputs(base, step).project()?;
            Ok(UpscalePoint {
                step: *step,
                step_time: p.step_time,
                required_bw_per_gpu: p.required_write_bw_per_gpu,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{HardwareConfig, ModelConfig};

    fn bert(tp: u64) -> ScenarioInputs {
        ScenarioInputs {
            model: ModelConfig::bert(12288, 3),
            parallelism: ParallelismConfig::tensor_parallel(tp),
            profile: ActivationProfile::default(),
            hardware: HardwareConfig::default(),
        }
    }

    #[test]
    fn data_parallel_growth_leaves_bandwidth_alone() {
        let base = bert(2);
        let counts = [2, 4, 16, 256];
        let policy = GrowthPolicy::data_parallel_only(&base.parallelism, &counts);
        let pts = upscale_bandwidth_projection(&base, &policy, &counts).unwrap();
        let b0 = base.project().unwrap().required_write_bw_per_gpu;
        for p in pts {
            assert_eq!(p.required_bw_per_gpu, b0);
        }
    }

    #[test]
    fn single_gpu_returns_base() {
        let base = bert(1);
        let policy = GrowthPolicy::typical(&base.parallelism, &[1], 8, 64);
        let pts = upscale_bandwidth_projection(&base, &policy, &[1]).unwrap();
        let p = base.project().unwrap();
        assert_eq!(pts[0].required_bw_per_gpu, p.required_write_bw_per_gpu);
        assert_eq!(pts[0].step_time, p.step_time);
    }

    #[test]
    fn typical_policy_layouts() {
        let base = ParallelismConfig::tensor_parallel(2);
        let policy = GrowthPolicy::typical(&base, &[2, 4, 8, 16, 64, 1024], 8, 16);
        let layout: Vec<(u64, u64, u64)> = policy
            .steps
            .iter()
            .map(|s| (s.tp_degree, s.pp_degree, s.dp_degree))
            .collect();
        assert_eq!(
            layout,
            [
                (2, 1, 1),
                (4, 1, 1),
                (8, 1, 1),
                (8, 2, 1),
                (8, 8, 1),
                (8, 16, 8)
            ]
        );
        for s in &policy.steps {
            assert_eq!(s.tp_degree * s.pp_degree * s.dp_degree, s.gpus);
        }
    }

    #[test]
    fn unknown_scale_is_an_error() {
        let base = bert(2);
        let policy = GrowthPolicy::from_steps(vec![]);
        assert_eq!(
            upscale_bandwidth_projection(&base, &policy, &[4]),
            Err(PerfError::UnknownScale(4))
        );
    }
}
