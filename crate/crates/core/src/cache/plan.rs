use serde::{Deserialize, Serialize};

use crate::config::PlanSection;

/// Default pass-through threshold: tensors under 2^20 elements stay put.
pub const DEFAULT_MIN_TENSOR_ELEMS: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OffloadPlan {
    /// Bytes to offload per step. The tensor that crosses the budget is
    /// still offloaded; everything after it is kept.
    pub budget_bytes: u64,
    /// Keep the tensors of a micro-batch's final module in memory once it is
    /// known to be followed directly by its backward.
    pub keep_last_module: bool,
    pub min_tensor_elems: u64,
    /// Modules to prefetch ahead of the one entering backward. `None`
    /// queues every remaining module at once.
    pub prefetch_depth: Option<usize>,
}

impl Default for OffloadPlan {
    fn default() -> Self {
        Self::keep_all()
    }
}

impl OffloadPlan {
    /// Offloads nothing.
    pub fn keep_all() -> Self {
        Self {
            budget_bytes: 0,
            keep_last_module: true,
            min_tensor_elems: DEFAULT_MIN_TENSOR_ELEMS,
            prefetch_depth: None,
        }
    }

    pub fn with_budget(budget_bytes: u64) -> Self {
        Self {
            budget_bytes,
            ..Self::keep_all()
        }
    }

    /// Overrides from a `[plan]` config section.
    pub fn apply(mut self, section: &PlanSection) -> Self {
        if let Some(b) = section.budget_bytes {
            self.budget_bytes = b;
        }
        if let Some(m) = section.min_tensor_elems {
            self.min_tensor_elems = m;
        }
        self.keep_last_module = section.keep_last_module;
        self.prefetch_depth = section.prefetch_depth;
        self
    }
}

/// Offload amount for one step: everything except what stays resident
/// anyway, capped by what the drives can absorb during the forward pass.
pub fn planner_budget(
    total_activation_bytes: f64,
    resident_bytes: f64,
    write_bw: f64,
    forward_time: f64,
) -> u64 {
    let offloadable = (total_activation_bytes - resident_bytes).max(0.0);
    let absorbable = (write_bw * forward_time).max(0.0);
    offloadable.min(absorbable).floor() as u64
}
