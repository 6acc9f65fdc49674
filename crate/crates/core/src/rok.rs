//! Recompute, offload and keep compared on (activation peak, throughput).
//!
//! Keep and layerwise recompute are closed form. Offload runs the harness on
//! the virtual clock at desk scale and scales the result back up. Every
//! strategy pays the same per-step weight-update cost, which is what makes
//! larger batches faster per sample.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activation::{activations_per_step, checkpointed_activations, flops_per_step};
use crate::cache::OffloadPlan;
use crate::harness::{build_workload, run_step, HarnessError, RunOptions};
use crate::perf::{PerfError, ScenarioInputs};
use crate::storage::ThrottleSpec;

/// Reload window for [`Strategy::offload_all`], counted in modules of the
/// synthetic workload (ops included). Wide enough to hide reload latency at
/// drive bandwidth, narrow enough that backward never holds the whole step.
pub const DEFAULT_PREFETCH_DEPTH: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Strategy {
    Keep,
    RecomputeLayerwise,
    /// Offload under a plan given at full scale, or the planner's default
    /// when `None`.
    Offload(Option<OffloadPlan>),
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Keep => "keep",
            Strategy::RecomputeLayerwise => "recompute",
            Strategy::Offload(_) => "offload",
        }
    }

    /// Offload every eligible tensor, reloading at most `prefetch_depth`
    /// modules ahead of backward.
    pub fn offload_all(prefetch_depth: usize) -> Strategy {
        Strategy::Offload(Some(OffloadPlan {
            budget_bytes: u64::MAX,
            keep_last_module: true,
            prefetch_depth: Some(prefetch_depth),
            ..OffloadPlan::keep_all()
        }))
    }

    /// The three strategies, offload everything with bounded prefetch.
    pub fn all() -> [Strategy; 3] {
        [
            Strategy::RecomputeLayerwise,
            Strategy::offload_all(DEFAULT_PREFETCH_DEPTH),
            Strategy::Keep,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RokPoint {
    pub strategy: Strategy,
    pub batch_size: u64,
    pub peak_bytes: f64,
    /// Algorithmic FLOP/s; recomputation does not count.
    pub model_throughput: f64,
    pub step_time: f64,
}

#[derive(Debug, Error)]
pub enum RokError {
    #[error(
        "{strategy} at batch {batch} needs {peak:.3e} B of activations, over {capacity:.3e} B"
    )]
    OutOfMemory {
        strategy: &'static str,
        batch: u64,
        peak: f64,
        capacity: f64,
    },
    #[error(transparent)]
    Perf(#[from] PerfError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("recompute needs at least one layer")]
    NoLayers,
}

/// How offload points are simulated.
#[derive(Debug, Clone, PartialEq)]
pub struct RokOptions {
    /// Desk-scale factor applied to the harness workload.
    pub shrink: f64,
    /// Storage bandwidth per GPU.
    pub throttle: ThrottleSpec,
    pub seed: u64,
}

impl RokOptions {
    /// The hardware's aggregate drive bandwidth at the default 1000x shrink.
    pub fn for_hardware(inputs: &ScenarioInputs) -> Self {
        Self {
            shrink: 1000.0,
            throttle: ThrottleSpec::symmetric(inputs.hardware.aggregate_ssd_write_bw()),
            seed: 0,
        }
    }
}

fn point(
    strategy: &Strategy,
    inputs: &ScenarioInputs,
    batch: u64,
    peak: f64,
    time: f64,
) -> RokPoint {
    RokPoint {
        strategy: strategy.clone(),
        batch_size: batch,
        peak_bytes: peak,
        model_throughput: flops_per_step(&inputs.model, &inputs.parallelism) / time,
        step_time: time,
    }
}

/// Evaluate one strategy with the micro-batch size set to `batch`.
pub fn evaluate_strategy(
    inputs: &ScenarioInputs,
    strategy: &Strategy,
    batch: u64,
    opts: &RokOptions,
) -> Result<RokPoint, RokError> {
    let inputs = ScenarioInputs {
        model: inputs.model.clone().with_micro_batch(batch),
        ..inputs.clone()
    };
    let proj = inputs.project()?;
    let fixed = inputs.weight_update_time();
    let compute = proj.step_time + fixed;
    let p = match strategy {
        Strategy::Keep => {
            let peak = activations_per_step(&inputs.model, &inputs.parallelism, &inputs.profile);
            point(strategy, &inputs, batch, peak, compute)
        }
        Strategy::RecomputeLayerwise => {
            let ck = checkpointed_activations(&inputs.model, &inputs.parallelism, &inputs.profile)
                .map_err(|_| RokError::NoLayers)?;
            point(
                strategy,
                &inputs,
                batch,
                ck.total(),
                compute + proj.forward_time,
            )
        }
        Strategy::Offload(plan) => {
            let workload = build_workload(&inputs, opts.shrink);
            let nmb = inputs.parallelism.num_microbatches as u32;
            let plan = match plan {
                Some(p) => OffloadPlan {
                    budget_bytes: (p.budget_bytes as f64 / opts.shrink) as u64,
                    min_tensor_elems: workload.min_tensor_elems(),
                    ..p.clone()
                },
                None => workload.planned(nmb, opts.throttle.write_bw),
            };
            let run_opts = RunOptions {
                microbatches: nmb,
                seed: opts.seed,
                weight_update_time: fixed / opts.shrink,
                ..RunOptions::virtual_clock(opts.throttle)
            };
            let m = run_step(&workload, &plan, &run_opts)?.metrics;
            point(
                strategy,
                &inputs,
                batch,
                m.peak_activation_bytes as f64 * opts.shrink,
                m.step_time * opts.shrink,
            )
        }
    };
    let capacity = inputs.hardware.gpu_mem_capacity;
    if p.peak_bytes > capacity {
        return Err(RokError::OutOfMemory {
            strategy: strategy.name(),
            batch,
            peak: p.peak_bytes,
            capacity,
        });
    }
    Ok(p)
}

/// A point that could not be evaluated, with the reason.
#[derive(Debug, Clone, PartialEq)]
pub struct Omitted {
    pub strategy: &'static str,
    pub batch: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RokCurve {
    pub points: Vec<RokPoint>,
    pub omitted: Vec<Omitted>,
}

/// Every strategy at every batch size. Points that run out of memory are
/// left out and listed in `omitted`.
pub fn rok_curve(
    inputs: &ScenarioInputs,
    strategies: &[Strategy],
    batches: &[u64],
    opts: &RokOptions,
) -> Result<RokCurve, RokError> {
    let mut curve = RokCurve::default();
    for s in strategies {
        for &b in batches {
            match evaluate_strategy(inputs, s, b, opts) {
                Ok(p) => curve.points.push(p),
                Err(e @ RokError::OutOfMemory { .. }) => curve.omitted.push(Omitted {
                    strategy: s.name(),
                    batch: b,
                    reason: e.to_string(),
                }),
                Err(e) => return Err(e),
            }
        }
    }
    Ok(curve)
}

/// Where the per-sample time saved by a larger batch comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputBreakdown {
    /// Per-sample step time saved going from the small to the large batch.
    pub per_sample_saving: f64,
    /// The part of it due to amortizing the fixed per-step cost.
    pub fixed_cost_saving: f64,
    /// The rest, from per-token compute getting more efficient.
    pub compute_saving: f64,
    /// `fixed_cost_saving / per_sample_saving`, 0 when nothing is saved.
    pub fixed_cost_share: f64,
}

/// Split the per-sample saving between two points of the same model into
/// fixed-cost amortization and everything else.
pub fn throughput_breakdown(
    small: &RokPoint,
    large: &RokPoint,
    fixed_cost: f64,
) -> ThroughputBreakdown {
    let per_sample = |p: &RokPoint| p.step_time / p.batch_size as f64;
    let saving = per_sample(small) - per_sample(large);
    let fixed = fixed_cost / small.batch_size as f64 - fixed_cost / large.batch_size as f64;
    ThroughputBreakdown {
        per_sample_saving: saving,
        fixed_cost_saving: fixed,
        compute_saving: saving - fixed,
        fixed_cost_share: if saving != 0.0 { fixed / saving } else { 0.0 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::ActivationProfile;
    use crate::config::{HardwareConfig, ModelConfig, ParallelismConfig};

    fn bert(h: u64, l: u64) -> ScenarioInputs {
        ScenarioInputs {
            model: ModelConfig::bert(h, l),
            parallelism: ParallelismConfig::tensor_parallel(2),
            profile: ActivationProfile::default(),
            hardware: HardwareConfig::default(),
        }
    }

    fn eval(inputs: &ScenarioInputs, s: Strategy, b: u64) -> RokPoint {
        evaluate_strategy(inputs, &s, b, &RokOptions::for_hardware(inputs)).unwrap()
    }

    #[test]
    fn keep_and_offload_share_throughput() {
        let i = bert(12288, 3);
        let k = eval(&i, Strategy::Keep, 16);
        let o = eval(&i, Strategy::Offload(None), 16);
        assert!((o.model_throughput / k.model_throughput - 1.0).abs() < 0.01);
        assert!(o.peak_bytes < k.peak_bytes);
    }

    #[test]
    fn recompute_is_slower_and_smaller() {
        let i = bert(12288, 3);
        let k = eval(&i, Strategy::Keep, 16);
        let r = eval(&i, Strategy::RecomputeLayerwise, 16);
        let o = eval(&i, Strategy::Offload(None), 16);
        assert!(r.model_throughput < k.model_throughput);
        assert!(r.model_throughput < o.model_throughput);
        assert!(r.peak_bytes <= o.peak_bytes && o.peak_bytes <= k.peak_bytes);
    }

    #[test]
    fn offloading_everything_doubles_the_batch() {
        let i = bert(12288, 3);
        let s = Strategy::offload_all(DEFAULT_PREFETCH_DEPTH);
        let k = eval(&i, Strategy::Keep, 16);
        let o = eval(&i, s.clone(), 16);
        let o2 = eval(&i, s, 32);
        assert!((o.model_throughput / k.model_throughput - 1.0).abs() < 0.01);
        assert!(o2.peak_bytes <= k.peak_bytes);
        assert!(o2.model_throughput >= k.model_throughput);
    }

    #[test]
    fn one_layer_recompute_adds_one_forward() {
        let i = bert(4096, 1);
        let k = eval(&i, Strategy::Keep, 8);
        let r = eval(&i, Strategy::RecomputeLayerwise, 8);
        let fwd = ScenarioInputs {
            model: i.model.clone().with_micro_batch(8),
            ..i.clone()
        }
        .project()
        .unwrap()
        .forward_time;
        assert!((r.step_time - k.step_time - fwd).abs() < 1e-12);
        // one layer: the recomputed layer is the whole model
        assert!(r.peak_bytes >= k.peak_bytes);
    }

    #[test]
    fn oversized_batch_is_out_of_memory() {
        let i = bert(16384, 2);
        let err = evaluate_strategy(&i, &Strategy::Keep, 256, &RokOptions::for_hardware(&i));
        assert!(matches!(err, Err(RokError::OutOfMemory { .. })));
        let curve = rok_curve(
            &i,
            &[Strategy::Keep],
            &[16, 256],
            &RokOptions::for_hardware(&i),
        )
        .unwrap();
        assert_eq!(curve.points.len(), 1);
        assert_eq!(curve.omitted.len(), 1);
    }

    #[test]
    fn no_strategies_no_points() {
        let i = bert(8192, 4);
        let c = rok_curve(&i, &[], &[8, 16], &RokOptions::for_hardware(&i)).unwrap();
        assert!(c.points.is_empty());
    }

    #[test]
    fn keep_throughput_grows_with_batch() {
        let i = bert(8192, 4);
        let t: Vec<f64> = [1, 2, 4, 8, 16]
            .iter()
            .map(|&b| eval(&i, Strategy::Keep, b).model_throughput)
            .collect();
        assert!(t.windows(2).all(|w| w[1] >= w[0]));
    }

    fn synthetic(batch: u64, time: f64) -> RokPoint {
        RokPoint {
            strategy: Strategy::Keep,
            batch_size: batch,
            peak_bytes: 0.0,
            model_throughput: 0.0,
            step_time: time,
        }
    }

    #[test]
    fn fixed_cost_amortization() {
        // per-sample compute 1 s, fixed cost 3 s
        let f = 3.0;
        let small = synthetic(1, 1.0 + f);
        let large = synthetic(16, 16.0 + f);
        let b = throughput_breakdown(&small, &large, f);
        assert!((b.fixed_cost_saving - f * 15.0 / 16.0).abs() < 1e-12);
        assert!(b.compute_saving.abs() < 1e-12);
        assert!((b.fixed_cost_share - 1.0).abs() < 1e-12);

        let b = throughput_breakdown(&synthetic(1, 1.0), &synthetic(16, 16.0), 0.0);
        assert_eq!(b.fixed_cost_saving, 0.0);
        assert_eq!(b.fixed_cost_share, 0.0);
    }

    #[test]
    fn default_fixed_cost_has_positive_share() {
        let i = bert(12288, 3);
        let small = eval(&i, Strategy::Keep, 1);
        let large = eval(&i, Strategy::Keep, 16);
        let b = throughput_breakdown(&small, &large, i.weight_update_time());
        assert!(b.fixed_cost_share > 0.0);
    }
}
