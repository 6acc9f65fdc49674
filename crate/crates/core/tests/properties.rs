use actoffload::cache::{
    ModuleId, OffloadPlan, PackedRef, StageEdge, StageKind, TensorCache, TensorHandle,
    DEFAULT_MIN_TENSOR_ELEMS,
};
use actoffload::config::{HardwareConfig, ModelConfig, ModelFamily, ParallelismConfig, Validate};
use actoffload::harness::{
    run_keep_baseline, run_step, RunOptions, Schedule, SyntheticModule, Workload,
};
use actoffload::perf::{
    projected_lifespan, required_write_bandwidth, transformer_layer_time, CostKind, LayerCost,
};
use actoffload::storage::{ThrottleSpec, VirtualEngine};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel(a: f64, b: f64) -> f64 {
    ((a - b) / b).abs()
}

fn model_strategy() -> impl Strategy<Value = ModelConfig> {
    (
        0u64..64,
        prop_oneof![Just(64u64), Just(128), Just(0), Just(96)],
        0u64..8,
        0u64..4096,
        0u64..64,
        prop_oneof![
            Just(ModelFamily::EncoderOnly),
            Just(ModelFamily::DecoderOnly),
            Just(ModelFamily::EncoderDecoder)
        ],
        any::<bool>(),
    )
        .prop_map(|(heads, head_dim, layers, seq, mb, family, consistent)| {
            let hidden = if consistent {
                heads * head_dim
            } else {
                heads * head_dim + 1
            };
            ModelConfig {
                family,
                hidden_dim: hidden,
                num_layers: layers,
                num_heads: heads,
                head_dim,
                seq_len: seq,
                micro_batch: mb,
                ..ModelConfig::default()
            }
        })
}

/// Workload of `layers` modules with the given per-op activation sizes,
/// shrunk so that every tensor of at least one element is tracked.
fn workload(layers: usize, sizes: &[f64], op_time: f64) -> Workload {
    let mut w = Workload::new(
        (0..layers as u64)
            .map(|i| SyntheticModule::uniform(i, op_time * sizes.len() as f64, sizes))
            .collect(),
    );
    w.shrink = DEFAULT_MIN_TENSOR_ELEMS as f64;
    assert_eq!(w.min_tensor_elems(), 1);
    w
}

fn plan(budget: u64, keep_last: bool) -> OffloadPlan {
    OffloadPlan {
        budget_bytes: budget,
        keep_last_module: keep_last,
        min_tensor_elems: 1,
        prefetch_depth: None,
    }
}

proptest! {
    #[test]
    fn validation_is_idempotent(m in model_strategy()) {
        let first = m.clone().validate();
        let second = m.clone().validate();
        prop_assert_eq!(first.is_ok(), second.is_ok());
        if let Ok(v) = first {
            prop_assert_eq!(&v, &m);
            prop_assert_eq!(v.clone().validate().unwrap(), v.clone());
            prop_assert_eq!(v.num_heads * v.head_dim, v.hidden_dim);
            prop_assert!(v.num_layers >= 1 && v.seq_len >= 1 && v.micro_batch >= 1);
            if v.family == ModelFamily::EncoderDecoder {
                prop_assert!(v.num_layers >= 2);
            }
        }
    }

    #[test]
    fn parallelism_validation_rejects_zero_degrees(
        tp in 0u64..5, pp in 0u64..5, dp in 0u64..5, zero in 0u8..6, nmb in 0u64..9,
    ) {
        let p = ParallelismConfig {
            tp_degree: tp, pp_degree: pp, dp_degree: dp, zero_stage: zero, num_microbatches: nmb,
        };
        let ok = p.clone().validate().is_ok();
        prop_assert_eq!(ok, p.clone().validate().is_ok());
        if ok {
            prop_assert!(tp >= 1 && pp >= 1 && dp >= 1 && nmb >= 1 && zero <= 3);
        }
        if tp == 0 || pp == 0 || dp == 0 {
            prop_assert!(!ok);
        }
    }

    #[test]
    fn lifespan_is_linear_in_step_time_and_inverse_in_bytes(
        acts in 1e6f64..1e13, t in 1e-3f64..1e3, k in 1.0f64..100.0,
    ) {
        let hw = HardwareConfig::default();
        let base = projected_lifespan(&hw, acts, t).unwrap().seconds().unwrap();
        let slower = projected_lifespan(&hw, acts, k * t).unwrap().seconds().unwrap();
        let heavier = projected_lifespan(&hw, k * acts, t).unwrap().seconds().unwrap();
        prop_assert!(rel(slower, k * base) < 1e-12);
        prop_assert!(rel(heavier, base / k) < 1e-12);
    }

    #[test]
    fn layer_time_is_monotone(
        flops in proptest::collection::vec(0.0f64..1e15, 1..6),
        bytes in proptest::collection::vec(0.0f64..1e11, 1..6),
        which in 0usize..6,
        extra_flops in 0.0f64..1e15,
        extra_bytes in 0.0f64..1e11,
        zc in 0.0f64..1.0,
    ) {
        let hw = HardwareConfig::default();
        let mut costs: Vec<LayerCost> = flops
            .iter()
            .zip(bytes.iter().cycle())
            .map(|(&f, &b)| LayerCost::compute(f, b))
            .collect();
        costs.push(LayerCost::new(CostKind::Communication, 0.0, bytes[0]));
        let before = transformer_layer_time(&costs, zc, &hw).unwrap();
        let i = which % costs.len();
        costs[i].flops += extra_flops;
        costs[i].bytes_moved += extra_bytes;
        let after = transformer_layer_time(&costs, zc, &hw).unwrap();
        prop_assert!(after >= before);
        let slower_comm = transformer_layer_time(&costs, zc + 1.0, &hw).unwrap();
        prop_assert!(slower_comm >= after);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn bandwidth_times_half_step_is_activation_bytes(
        acts in 1.0f64..1e14, t in 1e-6f64..1e4,
    ) {
        let bw = required_write_bandwidth(acts, t).unwrap();
        prop_assert!(rel(bw * t / 2.0, acts) <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unpack_returns_the_packed_bytes(
        sizes in proptest::collection::vec(1usize..20_000, 1..24),
        budget_frac in 0.0f64..1.5,
        bw in prop_oneof![Just(1e3), Just(1e6), Just(1e9), Just(1e12)],
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total: usize = sizes.iter().map(|s| s * 2).sum();
        let budget = (total as f64 * budget_frac) as u64;
        let mut c = TensorCache::new(VirtualEngine::new(ThrottleSpec::symmetric(bw)), plan(budget, false));
        c.stage_hint(StageKind::Forward, StageEdge::Begin);
        let mut packed = Vec::new();
        for (i, &n) in sizes.iter().enumerate() {
            let m = ModuleId(i as u64 + 1);
            c.on_forward_module_enter(m);
            let mut data = vec![0u8; n * 2];
            rng.fill(&mut data[..]);
            let t = TensorHandle::new(data, vec![n]);
            let sum = t.checksum();
            packed.push((m, c.pack(t).unwrap(), sum));
            c.on_forward_module_exit(m).unwrap();
            c.advance(1e-4);
        }
        c.stage_hint(StageKind::Forward, StageEdge::End);
        c.stage_hint(StageKind::Backward, StageEdge::Begin);
        for (m, p, sum) in packed.into_iter().rev() {
            c.on_backward_module_enter(m).unwrap();
            let back = c.unpack(&p).unwrap();
            prop_assert_eq!(back.checksum(), sum);
            prop_assert_eq!(matches!(p, PackedRef::Tracked(_)), true);
            c.on_backward_module_exit(m).unwrap();
        }
        c.stage_hint(StageKind::Backward, StageEdge::End);
        c.end_step().unwrap();
        prop_assert!(c.offloaded_this_step() <= total as u64);
    }

    #[test]
    fn offload_stays_within_budget_plus_one_tensor(
        layers in 1usize..5,
        sizes in proptest::collection::vec(256.0f64..8192.0, 1..6),
        budget_frac in 0.0f64..1.2,
        bw in 1e5f64..1e9,
        seed in any::<u64>(),
    ) {
        let sizes: Vec<f64> = sizes.iter().map(|s| (s / 2.0).round() * 2.0).collect();
        let w = workload(layers, &sizes, 1e-4);
        let budget = (w.activation_bytes() * budget_frac) as u64;
        let opts = RunOptions { seed, ..RunOptions::virtual_clock(ThrottleSpec::symmetric(bw)) };
        let m = run_step(&w, &plan(budget, true), &opts).unwrap().metrics;
        let largest = sizes.iter().cloned().fold(0.0, f64::max) as u64;
        prop_assert!(m.offloaded_bytes <= budget + largest);
        prop_assert!(m.offloaded_bytes <= m.activation_bytes);
        prop_assert!(m.peak_activation_bytes <= m.activation_bytes);
    }

    #[test]
    fn step_time_is_bounded_by_compute_and_io(
        layers in 1usize..5,
        sizes in proptest::collection::vec(256.0f64..8192.0, 1..6),
        bw in 1e5f64..1e9,
        microbatches in 1u32..4,
        one_f_one_b in any::<bool>(),
    ) {
        let sizes: Vec<f64> = sizes.iter().map(|s| (s / 2.0).round() * 2.0).collect();
        let w = workload(layers, &sizes, 1e-4);
        let throttle = ThrottleSpec::symmetric(bw);
        let opts = RunOptions {
            microbatches,
            schedule: if one_f_one_b { Schedule::OneForwardOneBackward } else { Schedule::Sequential },
            ..RunOptions::virtual_clock(throttle)
        };
        let m = run_step(&w, &plan(u64::MAX, true), &opts).unwrap().metrics;
        let write_time = m.offloaded_bytes as f64 / throttle.write_bw;
        let eps = 1e-9 * m.step_time.max(1.0);
        prop_assert!(m.step_time + eps >= m.compute_time);
        prop_assert!(m.step_time + eps >= write_time);
        prop_assert!(m.step_time <= m.compute_time + m.io_time(&throttle) + eps);
    }

    #[test]
    fn identical_microbatches_offload_the_same_bytes(
        layers in 1usize..4,
        sizes in proptest::collection::vec(256.0f64..8192.0, 1..5),
        microbatches in 2u32..5,
        bw in 1e5f64..1e9,
    ) {
        let sizes: Vec<f64> = sizes.iter().map(|s| (s / 2.0).round() * 2.0).collect();
        let w = workload(layers, &sizes, 1e-4);
        let opts = RunOptions {
            microbatches,
            schedule: Schedule::OneForwardOneBackward,
            ..RunOptions::virtual_clock(ThrottleSpec::symmetric(bw))
        };
        let m = run_step(&w, &plan(u64::MAX, true), &opts).unwrap().metrics;
        prop_assert_eq!(m.offloaded_per_microbatch.len(), microbatches as usize);
        let first = m.offloaded_per_microbatch[0];
        prop_assert!(m.offloaded_per_microbatch.iter().all(|&b| b == first));
    }

    #[test]
    fn zero_budget_matches_the_cacheless_baseline(
        layers in 1usize..4,
        sizes in proptest::collection::vec(256.0f64..8192.0, 1..5),
        microbatches in 1u32..4,
        one_f_one_b in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let w = workload(layers, &sizes, 1e-4);
        let opts = RunOptions {
            microbatches,
            seed,
            schedule: if one_f_one_b { Schedule::OneForwardOneBackward } else { Schedule::Sequential },
            ..RunOptions::virtual_clock(ThrottleSpec::symmetric(1e6))
        };
        let run = run_step(&w, &w.keep_plan(), &opts).unwrap();
        let base = run_keep_baseline(&w, &opts).unwrap();
        prop_assert_eq!(&run.metrics, &base.metrics);
        prop_assert_eq!(&run.trace, &base.trace);
    }
}
