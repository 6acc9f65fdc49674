use serde::{Deserialize, Serialize};

use crate::cache::{planner_budget, ModuleId, OffloadPlan, DEFAULT_MIN_TENSOR_ELEMS};
use crate::layer::{is_cross_layer, layer_ops};
use crate::perf::{zero_comm_time, ScenarioInputs};

/// One operator inside a module: its compute time and the activation it
/// saves for backward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticOp {
    pub name: String,
    pub forward_time: f64,
    pub backward_time: f64,
    /// Bytes saved for backward; zero for ops that save nothing.
    pub activation_bytes: f64,
}

impl SyntheticOp {
    pub fn new(name: impl Into<String>, forward_time: f64, activation_bytes: f64) -> Self {
        Self {
            name: name.into(),
            forward_time,
            backward_time: 2.0 * forward_time,
            activation_bytes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticModule {
    pub module_id: ModuleId,
    pub name: String,
    pub ops: Vec<SyntheticOp>,
}

impl SyntheticModule {
    /// A module with one op per activation, splitting the forward time
    /// evenly between them.
    pub fn uniform(index: u64, forward_time: f64, activation_sizes: &[f64]) -> Self {
        let n = activation_sizes.len().max(1) as f64;
        Self {
            module_id: layer_module_id(index),
            name: format!("layer{index}"),
            ops: activation_sizes
                .iter()
                .enumerate()
                .map(|(i, &b)| SyntheticOp::new(format!("op{i}"), forward_time / n, b))
                .collect(),
        }
    }

    pub fn forward_compute_time(&self) -> f64 {
        self.ops.iter().map(|o| o.forward_time).sum()
    }

    pub fn backward_compute_time(&self) -> f64 {
        self.ops.iter().map(|o| o.backward_time).sum()
    }

    pub fn activation_sizes(&self) -> Vec<f64> {
        self.ops
            .iter()
            .map(|o| o.activation_bytes)
            .filter(|&b| b > 0.0)
            .collect()
    }

    pub fn activation_bytes(&self) -> f64 {
        self.ops.iter().map(|o| o.activation_bytes).sum()
    }

    pub fn op_module_id(&self, op: usize) -> ModuleId {
        ModuleId(self.module_id.0 | (op as u64 + 1))
    }
}

pub fn layer_module_id(index: u64) -> ModuleId {
    ModuleId((index + 1) << 16)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub modules: Vec<SyntheticModule>,
    /// Factor already divided out of every size and time.
    pub shrink: f64,
    /// Bytes per element of the synthetic tensors.
    pub elem_size: u64,
}

impl Workload {
    pub fn new(modules: Vec<SyntheticModule>) -> Self {
        Self {
            modules,
            shrink: 1.0,
            elem_size: 2,
        }
    }

    pub fn forward_time(&self) -> f64 {
        self.modules
            .iter()
            .map(SyntheticModule::forward_compute_time)
            .sum()
    }

    pub fn backward_time(&self) -> f64 {
        self.modules
            .iter()
            .map(SyntheticModule::backward_compute_time)
            .sum()
    }

    pub fn activation_bytes(&self) -> f64 {
        self.modules
            .iter()
            .map(SyntheticModule::activation_bytes)
            .sum()
    }

    /// Pass-through threshold scaled with the workload.
    pub fn min_tensor_elems(&self) -> u64 {
        ((DEFAULT_MIN_TENSOR_ELEMS as f64 / self.shrink).round() as u64).max(1)
    }

    /// Bytes of the op that packs last in forward; it stays resident when
    /// backward follows directly.
    pub fn last_packed_bytes(&self) -> f64 {
        self.modules
            .iter()
            .rev()
            .flat_map(|m| m.ops.iter().rev())
            .map(|o| o.activation_bytes)
            .find(|&b| b > 0.0)
            .unwrap_or(0.0)
    }

    /// Plan with the default budget for `microbatches` micro-batches written
    /// at `write_bw` bytes/s.
    pub fn planned(&self, microbatches: u32, write_bw: f64) -> OffloadPlan {
        let n = microbatches as f64;
        let budget = planner_budget(
            self.activation_bytes() * n,
            self.last_packed_bytes(),
            write_bw,
            self.forward_time() * n,
        );
        OffloadPlan {
            budget_bytes: budget,
            keep_last_module: true,
            min_tensor_elems: self.min_tensor_elems(),
            prefetch_depth: None,
        }
    }

    /// Same workload with a budget-0 plan.
    pub fn keep_plan(&self) -> OffloadPlan {
        OffloadPlan {
            min_tensor_elems: self.min_tensor_elems(),
            ..OffloadPlan::keep_all()
        }
    }
}

/// One module per transformer layer, one op per layer operator. Times come
/// from the pipeline model and sizes from the activation model, both divided
/// by `shrink`.
pub fn build_workload(inputs: &ScenarioInputs, shrink: f64) -> Workload {
    let hw = &inputs.hardware;
    let zc = zero_comm_time(&inputs.model, &inputs.parallelism, hw);
    let modules = (0..inputs.model.num_layers)
        .map(|i| {
            let cross = is_cross_layer(&inputs.model, i);
            let mut ops: Vec<SyntheticOp> =
                layer_ops(&inputs.model, &inputs.parallelism, &inputs.profile, cross)
                    .into_iter()
                    .map(|op| {
                        SyntheticOp::new(
                            op.name,
                            op.cost.time(hw) / shrink,
                            op.saved_bytes / shrink,
                        )
                    })
                    .collect();
            let inner: f64 = ops.iter().map(|o| o.forward_time).sum();
            if zc / shrink > inner {
                // weight gathering dominates the layer
                ops.push(SyntheticOp::new(
                    "zero_gather_wait",
                    zc / shrink - inner,
                    0.0,
                ));
            }
            SyntheticModule {
                module_id: layer_module_id(i),
                name: format!("layer{i}"),
                ops,
            }
        })
        .collect();
    Workload {
        modules,
        shrink,
        elem_size: inputs.model.bytes_per_element,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::ActivationProfile;
    use crate::config::{HardwareConfig, ModelConfig, ParallelismConfig};

    fn bert(layers: u64) -> ScenarioInputs {
        ScenarioInputs {
            model: ModelConfig::bert(12288, layers),
            parallelism: ParallelismConfig::tensor_parallel(2),
            profile: ActivationProfile::default(),
            hardware: HardwareConfig::default(),
        }
    }

    #[test]
    fn one_module_per_layer() {
        let w = build_workload(&bert(3), 1.0);
        assert_eq!(w.modules.len(), 3);
        for m in &w.modules {
            assert!((m.activation_bytes() / 4.43e9 - 1.0).abs() < 1e-3);
            assert!((m.backward_compute_time() - 2.0 * m.forward_compute_time()).abs() < 1e-12);
        }
        assert!(build_workload(&bert(0), 1.0).modules.is_empty());
    }

    #[test]
    fn shrink_preserves_ratios() {
        let full = build_workload(&bert(3), 1.0);
        let small = build_workload(&bert(3), 1000.0);
        let r_full = full.activation_bytes() / full.forward_time();
        let r_small = small.activation_bytes() / small.forward_time();
        assert!(((r_full - r_small) / r_full).abs() < 1e-12);
        assert!((full.activation_bytes() / small.activation_bytes() - 1000.0).abs() < 1e-9);
        assert_eq!(small.min_tensor_elems(), 1049);
    }

    #[test]
    fn op_ids_nest_under_layers() {
        let w = build_workload(&bert(2), 1.0);
        let m = &w.modules[1];
        assert_eq!(m.module_id, ModuleId(2 << 16));
        assert_eq!(m.op_module_id(0), ModuleId((2 << 16) | 1));
    }

    #[test]
    fn planner_leaves_last_op_resident() {
        let w = build_workload(&bert(3), 1000.0);
        let p = w.planned(1, f64::INFINITY);
        let want = w.activation_bytes() - w.last_packed_bytes();
        assert!((p.budget_bytes as f64 - want).abs() <= 1.0);
    }
}
