//! Synthetic training-step driver.
//!
//! Replays a [`Workload`] through a [`TensorCache`]: forward passes emit
//! module and stage hints and pack one checksummed random tensor per
//! activation, backward passes unpack them in reverse and verify the bytes.
//! Compute is a timed no-op. With the virtual clock every duration is
//! simulated and a run is a pure function of its inputs; with the real clock
//! the storage workers do actual file I/O while the driver sleeps through
//! compute.

mod workload;

pub use workload::{build_workload, layer_module_id, SyntheticModule, SyntheticOp, Workload};

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{
    CacheError, OffloadPlan, PackedRef, StageEdge, StageKind, TensorCache, TensorHandle,
};
use crate::storage::{
    FileBackend, StorageError, ThreadedEngine, ThrottleSpec, TransferEngine, VirtualEngine,
    STORAGE_ROOT_ENV,
};
use crate::trace::{peak_memory, EventKind, EventTrace, TraceError, TraceEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    Virtual,
    Real,
}

/// Order of micro-batch passes within a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// Every forward, then every backward in reverse micro-batch order.
    Sequential,
    /// Each micro-batch's backward runs right after its forward, as on the
    /// last stage of a one-forward-one-backward pipeline.
    OneForwardOneBackward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Forward(u32),
    Backward(u32),
}

impl Schedule {
    fn phases(self, microbatches: u32) -> Vec<Phase> {
        match self {
            Schedule::Sequential => (0..microbatches)
                .map(Phase::Forward)
                .chain((0..microbatches).rev().map(Phase::Backward))
                .collect(),
            Schedule::OneForwardOneBackward => (0..microbatches)
                .flat_map(|m| [Phase::Forward(m), Phase::Backward(m)])
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub clock: ClockMode,
    pub throttle: ThrottleSpec,
    pub microbatches: u32,
    pub schedule: Schedule,
    pub seed: u64,
    /// Directory for the file backend in real mode. Falls back to
    /// `ACTOFFLOAD_STORAGE_ROOT`, then the system temp dir.
    pub storage_root: Option<PathBuf>,
    /// Per-step fixed cost after the last backward.
    pub weight_update_time: f64,
}

impl RunOptions {
    pub fn virtual_clock(throttle: ThrottleSpec) -> Self {
        Self {
            clock: ClockMode::Virtual,
            throttle,
            microbatches: 1,
            schedule: Schedule::Sequential,
            seed: 0,
            storage_root: None,
            weight_update_time: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step_time: f64,
    pub peak_activation_bytes: u64,
    pub offloaded_bytes: u64,
    pub forwarded_count: u64,
    pub backend_reads: u64,
    pub backend_writes: u64,
    pub bytes_read: u64,
    /// Total forward and backward compute time.
    pub compute_time: f64,
    pub activation_bytes: u64,
    /// Bytes written per micro-batch, by micro-batch index.
    pub offloaded_per_microbatch: Vec<u64>,
}

impl StepMetrics {
    /// Time the drives were busy, at the throttle bandwidths.
    pub fn io_time(&self, throttle: &ThrottleSpec) -> f64 {
        self.offloaded_bytes as f64 / throttle.write_bw + self.bytes_read as f64 / throttle.read_bw
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub metrics: StepMetrics,
    pub trace: EventTrace,
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("{0} came back with different bytes")]
    ChecksumMismatch(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

struct Saved {
    packed: PackedRef,
    checksum: u32,
    label: String,
}

fn tensor_label(mb: u32, module: &SyntheticModule, op: &SyntheticOp) -> String {
    format!("mb{mb}/{}/{}", module.name, op.name)
}

fn random_tensor(rng: &mut ChaCha8Rng, bytes: u64, elem_size: u64) -> TensorHandle {
    let elem = elem_size.max(1);
    let bytes = bytes / elem * elem;
    let mut data = vec![0u8; bytes as usize];
    rng.fill_bytes(&mut data);
    TensorHandle::new(data, vec![(bytes / elem) as usize])
}

fn tensor_bytes(op: &SyntheticOp) -> u64 {
    op.activation_bytes.round().max(0.0) as u64
}

fn drive<E: TransferEngine>(
    cache: &mut TensorCache<E>,
    workload: &Workload,
    opts: &RunOptions,
) -> Result<f64, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut saved: Vec<Vec<Vec<Option<Saved>>>> = (0..opts.microbatches)
        .map(|_| {
            workload
                .modules
                .iter()
                .map(|m| m.ops.iter().map(|_| None).collect())
                .collect()
        })
        .collect();
    let start = cache.now();
    for phase in opts.schedule.phases(opts.microbatches) {
        match phase {
            Phase::Forward(mb) => {
                cache.switch_microbatch(mb);
                cache.stage_hint(StageKind::Forward, StageEdge::Begin);
                for (mi, module) in workload.modules.iter().enumerate() {
                    cache.on_forward_module_enter(module.module_id);
                    for (oi, op) in module.ops.iter().enumerate() {
                        let op_id = module.op_module_id(oi);
                        cache.on_forward_module_enter(op_id);
                        let label = tensor_label(mb, module, op);
                        cache.note(EventKind::ComputeStart, format!("{label}/fwd"), 0);
                        cache.advance(op.forward_time);
                        cache.note(EventKind::ComputeEnd, format!("{label}/fwd"), 0);
                        let bytes = tensor_bytes(op);
                        if bytes > 0 {
                            let t = random_tensor(&mut rng, bytes, workload.elem_size);
                            let checksum = t.checksum();
                            let packed = cache.pack_labeled(t, Some(&label))?;
                            saved[mb as usize][mi][oi] = Some(Saved {
                                packed,
                                checksum,
                                label,
                            });
                        }
                        cache.on_forward_module_exit(op_id)?;
                    }
                    cache.on_forward_module_exit(module.module_id)?;
                }
                cache.stage_hint(StageKind::Forward, StageEdge::End);
            }
            Phase::Backward(mb) => {
                cache.switch_microbatch(mb);
                cache.stage_hint(StageKind::Backward, StageEdge::Begin);
                for (mi, module) in workload.modules.iter().enumerate().rev() {
                    cache.on_backward_module_enter(module.module_id)?;
                    for (oi, op) in module.ops.iter().enumerate().rev() {
                        let op_id = module.op_module_id(oi);
                        cache.on_backward_module_enter(op_id)?;
                        if let Some(s) = saved[mb as usize][mi][oi].take() {
                            let h = cache.unpack(&s.packed)?;
                            if h.checksum() != s.checksum {
                                return Err(HarnessError::ChecksumMismatch(s.label));
                            }
                        }
                        let label = tensor_label(mb, module, op);
                        cache.note(EventKind::ComputeStart, format!("{label}/bwd"), 0);
                        cache.advance(op.backward_time);
                        cache.note(EventKind::ComputeEnd, format!("{label}/bwd"), 0);
                        cache.on_backward_module_exit(op_id)?;
                    }
                    cache.on_backward_module_exit(module.module_id)?;
                }
                cache.stage_hint(StageKind::Backward, StageEdge::End);
            }
        }
    }
    cache.stage_hint(StageKind::WeightUpdate, StageEdge::Begin);
    cache.note(EventKind::ComputeStart, "weight_update", 0);
    cache.advance(opts.weight_update_time);
    cache.note(EventKind::ComputeEnd, "weight_update", 0);
    cache.stage_hint(StageKind::WeightUpdate, StageEdge::End);
    // the step is over once the drives are idle again
    cache.end_step()?;
    Ok(cache.now() - start)
}

fn collect<E: TransferEngine>(
    mut cache: TensorCache<E>,
    workload: &Workload,
    opts: &RunOptions,
    step_time: f64,
) -> Result<StepOutcome, HarnessError> {
    let trace = cache.take_trace();
    let peak = peak_memory(&trace)?;
    let io = cache.engine().stats();
    let stats = cache.stats();
    let mut per_mb = vec![0u64; opts.microbatches as usize];
    for e in trace.of_kind(EventKind::StoreEnd) {
        if let Some(mb) = e
            .subject
            .strip_prefix("mb")
            .and_then(|s| s.split('/').next())
            .and_then(|s| s.parse::<usize>().ok())
        {
            if let Some(slot) = per_mb.get_mut(mb) {
                *slot += e.bytes;
            }
        }
    }
    let n = opts.microbatches as f64;
    Ok(StepOutcome {
        metrics: StepMetrics {
            step_time,
            peak_activation_bytes: peak,
            offloaded_bytes: io.bytes_written,
            forwarded_count: stats.forwarded,
            backend_reads: io.reads,
            backend_writes: io.writes,
            bytes_read: io.bytes_read,
            compute_time: n * (workload.forward_time() + workload.backward_time())
                + opts.weight_update_time,
            activation_bytes: tracked_bytes(workload, cache.plan().min_tensor_elems) * opts.microbatches as u64,
            offloaded_per_microbatch: per_mb,
        },
        trace,
    })
}

/// Bytes per micro-batch the cache would track with pass-through threshold
/// `min` elements.
fn tracked_bytes(workload: &Workload, min: u64) -> u64 {
    workload
        .modules
        .iter()
        .flat_map(|m| &m.ops)
        .map(tensor_bytes)
        .filter(|&b| b / workload.elem_size.max(1) >= min)
        .map(|b| b / workload.elem_size.max(1) * workload.elem_size.max(1))
        .sum()
}

static RUN_COUNTER: AtomicU64 = AtomicU64::new(0);

fn real_backend(opts: &RunOptions) -> std::io::Result<FileBackend> {
    let base = match &opts.storage_root {
        Some(p) => p.clone(),
        None => std::env::var_os(STORAGE_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| std::env::temp_dir().join("actoffload")),
    };
    let run = RUN_COUNTER.fetch_add(1, Ordering::Relaxed);
    FileBackend::new(base.join(format!("run-{}-{run}", std::process::id())))
}

/// Run one training step of `workload` under `plan`.
pub fn run_step(
    workload: &Workload,
    plan: &OffloadPlan,
    opts: &RunOptions,
) -> Result<StepOutcome, HarnessError> {
    match opts.clock {
        ClockMode::Virtual => {
            let mut cache = TensorCache::new(VirtualEngine::new(opts.throttle), plan.clone());
            let t = drive(&mut cache, workload, opts)?;
            collect(cache, workload, opts, t)
        }
        ClockMode::Real => {
            let backend = Arc::new(real_backend(opts)?);
            let throttle = opts.throttle.write_bw.is_finite().then_some(opts.throttle);
            let mut cache = TensorCache::new(ThreadedEngine::new(backend, throttle), plan.clone());
            let t = drive(&mut cache, workload, opts)?;
            collect(cache, workload, opts, t)
        }
    }
}

/// The same step with no cache at all: every tracked tensor is allocated
/// when produced and freed after its backward. Virtual clock only. Tensors
/// count as tracked under the workload's own pass-through threshold, the one
/// [`Workload::keep_plan`] and [`Workload::planned`] use.
pub fn run_keep_baseline(
    workload: &Workload,
    opts: &RunOptions,
) -> Result<StepOutcome, TraceError> {
    let mut now = 0.0;
    let mut events = Vec::new();
    let push = |events: &mut Vec<TraceEvent>, time, kind, subject: String, bytes| {
        events.push(TraceEvent {
            time,
            kind,
            subject,
            bytes,
        })
    };
    let min = workload.min_tensor_elems();
    let elem = workload.elem_size.max(1);
    let tracked = |op: &SyntheticOp| {
        let b = tensor_bytes(op) / elem * elem;
        (b > 0 && b / elem >= min).then_some(b)
    };
    for phase in opts.schedule.phases(opts.microbatches) {
        match phase {
            Phase::Forward(mb) => {
                for module in &workload.modules {
                    for op in &module.ops {
                        let label = tensor_label(mb, module, op);
                        push(
                            &mut events,
                            now,
                            EventKind::ComputeStart,
                            format!("{label}/fwd"),
                            0,
                        );
                        now += op.forward_time;
                        push(
                            &mut events,
                            now,
                            EventKind::ComputeEnd,
                            format!("{label}/fwd"),
                            0,
                        );
                        if let Some(b) = tracked(op) {
                            push(&mut events, now, EventKind::Alloc, label, b);
                        }
                    }
                }
            }
            Phase::Backward(mb) => {
                for module in workload.modules.iter().rev() {
                    for op in module.ops.iter().rev() {
                        let label = tensor_label(mb, module, op);
                        push(
                            &mut events,
                            now,
                            EventKind::ComputeStart,
                            format!("{label}/bwd"),
                            0,
                        );
                        now += op.backward_time;
                        push(
                            &mut events,
                            now,
                            EventKind::ComputeEnd,
                            format!("{label}/bwd"),
                            0,
                        );
                        if let Some(b) = tracked(op) {
                            push(&mut events, now, EventKind::Free, label, b);
                        }
                    }
                }
            }
        }
    }
    push(
        &mut events,
        now,
        EventKind::ComputeStart,
        "weight_update".into(),
        0,
    );
    now += opts.weight_update_time;
    push(
        &mut events,
        now,
        EventKind::ComputeEnd,
        "weight_update".into(),
        0,
    );
    let trace = EventTrace::new(events);
    let n = opts.microbatches as f64;
    Ok(StepOutcome {
        metrics: StepMetrics {
            step_time: now,
            peak_activation_bytes: peak_memory(&trace)?,
            offloaded_bytes: 0,
            forwarded_count: 0,
            backend_reads: 0,
            backend_writes: 0,
            bytes_read: 0,
            compute_time: n * (workload.forward_time() + workload.backward_time())
                + opts.weight_update_time,
            activation_bytes: tracked_bytes(workload, min) * opts.microbatches as u64,
            offloaded_per_microbatch: vec![0; opts.microbatches as usize],
        },
        trace,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    /// Offload step time over keep step time.
    pub step_time_ratio: f64,
    /// `1 - peak(offload) / peak(keep)`.
    pub peak_reduction: f64,
    pub offload: StepMetrics,
    pub keep: StepMetrics,
}

/// Run `plan` and a budget-0 plan on the same workload and compare.
pub fn compare_baseline(
    workload: &Workload,
    plan: &OffloadPlan,
    opts: &RunOptions,
) -> Result<Comparison, HarnessError> {
    let offload = run_step(workload, plan, opts)?.metrics;
    let keep_plan = OffloadPlan {
        budget_bytes: 0,
        ..plan.clone()
    };
    let keep = run_step(workload, &keep_plan, opts)?.metrics;
    let peak_reduction = if keep.peak_activation_bytes == 0 {
        0.0
    } else {
        1.0 - offload.peak_activation_bytes as f64 / keep.peak_activation_bytes as f64
    };
    Ok(Comparison {
        step_time_ratio: offload.step_time / keep.step_time,
        peak_reduction,
        offload,
        keep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_layers() -> Workload {
        let mib = (1u64 << 20) as f64;
        Workload::new(
            (0..3)
                .map(|i| SyntheticModule::uniform(i, 0.01, &[4.0 * mib, 4.0 * mib]))
                .collect(),
        )
    }

    fn opts(bw: f64) -> RunOptions {
        RunOptions::virtual_clock(ThrottleSpec::symmetric(bw))
    }

    #[test]
    fn budget_zero_matches_baseline() {
        let w = three_layers();
        let o = opts(1e9);
        let run = run_step(&w, &w.keep_plan(), &o).unwrap();
        let base = run_keep_baseline(&w, &o).unwrap();
        assert_eq!(run.metrics.step_time, base.metrics.step_time);
        assert_eq!(run.metrics.backend_writes, 0);
        assert_eq!(run.trace, base.trace);
        assert_eq!(run.metrics.peak_activation_bytes, 6 * (4 << 20));
    }

    #[test]
    fn same_plan_twice_compares_equal() {
        let w = three_layers();
        let c = compare_baseline(&w, &w.keep_plan(), &opts(1e9)).unwrap();
        assert_eq!(c.step_time_ratio, 1.0);
        assert_eq!(c.peak_reduction, 0.0);
    }

    #[test]
    fn offload_round_trips_and_lowers_peak() {
        let w = three_layers();
        // write bandwidth that just covers the forward pass
        let o = opts(w.activation_bytes() / w.forward_time());
        let plan = w.planned(1, o.throttle.write_bw);
        let run = run_step(&w, &plan, &o).unwrap();
        run.trace.check().unwrap();
        assert!(run.metrics.backend_writes > 0);
        let base = run_keep_baseline(&w, &o).unwrap();
        assert!(run.metrics.peak_activation_bytes < base.metrics.peak_activation_bytes);
        assert!(run.metrics.step_time <= base.metrics.step_time * 1.05);
    }

    #[test]
    fn slow_drives_stretch_the_step() {
        let w = three_layers();
        let fwd = w.forward_time();
        // writing everything takes longer than the whole step
        let o = opts(w.activation_bytes() / fwd / 4.0);
        let plan = OffloadPlan {
            budget_bytes: u64::MAX,
            ..w.keep_plan()
        };
        let run = run_step(&w, &plan, &o).unwrap();
        run.trace.check().unwrap();
        assert!(run.metrics.forwarded_count > 0);
        assert!(run.metrics.backend_reads < run.metrics.backend_writes);
        let last_store = run
            .trace
            .of_kind(EventKind::StoreEnd)
            .map(|e| e.time)
            .fold(0.0, f64::max);
        assert!(last_store > fwd);
        assert!(run.metrics.step_time > 3.0 * fwd);
    }

    #[test]
    fn virtual_runs_are_deterministic() {
        let w = three_layers();
        let o = opts(3e8);
        let plan = w.planned(2, o.throttle.write_bw);
        let a = run_step(
            &w,
            &plan,
            &RunOptions {
                microbatches: 2,
                ..o.clone()
            },
        )
        .unwrap();
        let b = run_step(
            &w,
            &plan,
            &RunOptions {
                microbatches: 2,
                ..o
            },
        )
        .unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn schedules_order_phases() {
        assert_eq!(
            Schedule::Sequential.phases(2),
            [
                Phase::Forward(0),
                Phase::Forward(1),
                Phase::Backward(1),
                Phase::Backward(0)
            ]
        );
        assert_eq!(
            Schedule::OneForwardOneBackward.phases(2),
            [
                Phase::Forward(0),
                Phase::Backward(0),
                Phase::Forward(1),
                Phase::Backward(1)
            ]
        );
    }

    #[test]
    fn real_clock_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let w = three_layers();
        let o = RunOptions {
            clock: ClockMode::Real,
            storage_root: Some(dir.path().to_path_buf()),
            ..opts(f64::INFINITY)
        };
        let plan = OffloadPlan {
            budget_bytes: u64::MAX,
            keep_last_module: false,
            ..w.keep_plan()
        };
        let run = run_step(&w, &plan, &o).unwrap();
        assert!(run.metrics.backend_writes > 0);
    }
}
