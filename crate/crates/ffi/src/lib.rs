//! C ABI over the activation offloading engine and models.
//!
//! Objects cross the boundary as opaque handles created by `ao_*_new` (or
//! `ao_config_load`) and released by the matching `ao_*_free`. Every call
//! that can fail returns an [`AoStatus`]; the message of the last failure on
//! the calling thread is available from [`ao_last_error`]. Panics never
//! unwind into C, they come back as [`AoStatus::Panic`].
//!
//! Handles are not thread safe. Use one cache per thread or lock around it.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use actoffload::activation::activations_per_step;
use actoffload::cache::{
    ModuleId, OffloadPlan, PackedRef, StageEdge, StageKind, TensorCache, TensorHandle,
};
use actoffload::config::ConfigFile;
use actoffload::perf::{required_write_bandwidth, ScenarioInputs};
use actoffload::storage::{
    FileBackend, ThreadedEngine, ThrottleSpec, TransferEngine, VirtualEngine,
};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Model = 4,
    Cache = 5,
    Storage = 6,
    Panic = 7,
}

/// Opaque configuration: model, parallelism, hardware and plan sections.
pub struct AoConfig(ConfigFile);

/// Opaque tensor cache over a transfer engine.
pub struct AoCache(TensorCache<Box<dyn TransferEngine>>);

/// Opaque tensor buffer with its shape.
pub struct AoTensor(TensorHandle);

/// Opaque reference returned by pack and consumed by unpack.
pub struct AoPacked(PackedRef);

/// Model-level projection for one configuration.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct AoProjection {
    pub step_time_s: f64,
    pub forward_time_s: f64,
    pub activations_per_gpu: f64,
    pub required_write_bw: f64,
    /// `INFINITY` when nothing is written.
    pub lifespan_years: f64,
    pub max_activations_per_gpu: f64,
}

/// Storage and plan settings for a new cache.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct AoCacheOptions {
    /// Bytes/s; 0 or less means unthrottled.
    pub write_bw: f64,
    pub read_bw: f64,
    pub budget_bytes: u64,
    pub min_tensor_elems: u64,
    pub keep_last_module: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct AoCacheStats {
    pub packed: u64,
    pub pass_through: u64,
    pub kept: u64,
    pub offloaded: u64,
    pub offloaded_bytes: u64,
    pub forwarded: u64,
    pub loads: u64,
    pub released: u64,
    pub backend_writes: u64,
    pub backend_reads: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AoStage {
    Forward = 0,
    Backward = 1,
    WeightUpdate = 2,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes stripped"));
}

fn fail(status: AoStatus, msg: impl Into<String>) -> AoStatus {
    set_error(msg);
    status
}

/// Run `f`, turning panics into `AoStatus::Panic`.
fn guard(f: impl FnOnce() -> AoStatus) -> AoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(AoStatus::Panic, msg)
        }
    }
}

macro_rules! deref {
    ($p:expr) => {
        match unsafe { $p.as_ref() } {
            Some(v) => v,
            None => return fail(AoStatus::NullPointer, concat!(stringify!($p), " is null")),
        }
    };
}

macro_rules! deref_mut {
    ($p:expr) => {
        match unsafe { $p.as_mut() } {
            Some(v) => v,
            None => return fail(AoStatus::NullPointer, concat!(stringify!($p), " is null")),
        }
    };
}

fn put<T>(out: *mut *mut T, value: T) -> AoStatus {
    unsafe { *out = Box::into_raw(Box::new(value)) };
    AoStatus::Ok
}

fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(unsafe { Box::from_raw(p) });
    }
}

/// Message of the last failed call on this thread. Valid until the next
/// failing call on the same thread; never null.
#[no_mangle]
pub extern "C" fn ao_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn ao_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// The built-in configuration: 3-layer BERT, hidden 12288, batch 16, TP 2.
#[no_mangle]
pub extern "C" fn ao_config_default(out: *mut *mut AoConfig) -> AoStatus {
    guard(|| {
        if out.is_null() {
            return fail(AoStatus::NullPointer, "out is null");
        }
        put(out, AoConfig(actoffload::cli::default_config()))
    })
}

/// Load and validate a TOML configuration file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ao_config_load(path: *const c_char, out: *mut *mut AoConfig) -> AoStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return fail(AoStatus::NullPointer, "path or out is null");
        }
        let Ok(path) = unsafe { CStr::from_ptr(path) }.to_str() else {
            return fail(AoStatus::InvalidArgument, "path is not UTF-8");
        };
        match ConfigFile::load(path) {
            Ok(c) => put(out, AoConfig(c)),
            Err(e) => fail(AoStatus::Config, e.to_string()),
        }
    })
}

#[no_mangle]
pub extern "C" fn ao_config_free(config: *mut AoConfig) {
    free(config)
}

/// Step time, activations, bandwidth and lifespan for `config`.
///
/// # Safety
/// `config` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ao_config_project(
    config: *const AoConfig,
    out: *mut AoProjection,
) -> AoStatus {
    guard(|| {
        let cfg = &deref!(config).0;
        let out = deref_mut!(out);
        let inputs = ScenarioInputs {
            model: cfg.model.clone(),
            parallelism: cfg.parallelism.clone(),
            profile: cfg.activation_profile.clone(),
            hardware: cfg.hardware.clone(),
        };
        match inputs.project() {
            Ok(p) => {
                *out = AoProjection {
                    step_time_s: p.step_time,
                    forward_time_s: p.forward_time,
                    activations_per_gpu: p.activations_per_gpu,
                    required_write_bw: p.required_write_bw_per_gpu,
                    lifespan_years: p.projected_lifespan.years().unwrap_or(f64::INFINITY),
                    max_activations_per_gpu: p.max_activations_per_gpu,
                };
                AoStatus::Ok
            }
            Err(e) => fail(AoStatus::Model, e.to_string()),
        }
    })
}

/// Activation bytes saved per GPU over one step.
///
/// # Safety
/// `config` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ao_config_activations(config: *const AoConfig, out: *mut f64) -> AoStatus {
    guard(|| {
        let cfg = &deref!(config).0;
        *deref_mut!(out) =
            activations_per_step(&cfg.model, &cfg.parallelism, &cfg.activation_profile);
        AoStatus::Ok
    })
}

/// Write bandwidth that moves `activation_bytes` in half of `step_time_s`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ao_required_write_bandwidth(
    activation_bytes: f64,
    step_time_s: f64,
    out: *mut f64,
) -> AoStatus {
    guard(|| {
        let out = deref_mut!(out);
        match required_write_bandwidth(activation_bytes, step_time_s) {
            Ok(bw) => {
                *out = bw;
                AoStatus::Ok
            }
            Err(e) => fail(AoStatus::InvalidArgument, e.to_string()),
        }
    })
}

fn plan_of(o: &AoCacheOptions) -> OffloadPlan {
    OffloadPlan {
        budget_bytes: o.budget_bytes,
        keep_last_module: o.keep_last_module,
        min_tensor_elems: o.min_tensor_elems,
        prefetch_depth: None,
    }
}

fn throttle_of(o: &AoCacheOptions) -> ThrottleSpec {
    let bw = |b: f64| if b > 0.0 { b } else { f64::INFINITY };
    ThrottleSpec {
        write_bw: bw(o.write_bw),
        read_bw: bw(o.read_bw),
        fixed_latency: 0.0,
    }
}

/// Cache over an in-memory store on a simulated clock.
///
/// # Safety
/// `options` must be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ao_cache_new_virtual(
    options: *const AoCacheOptions,
    out: *mut *mut AoCache,
) -> AoStatus {
    guard(|| {
        let o = deref!(options);
        if out.is_null() {
            return fail(AoStatus::NullPointer, "out is null");
        }
        let engine: Box<dyn TransferEngine> = Box::new(VirtualEngine::new(throttle_of(o)));
        put(out, AoCache(TensorCache::new(engine, plan_of(o))))
    })
}

/// Cache writing files under `root` with background worker threads. The
/// bandwidths in `options` throttle the workers; 0 leaves them unthrottled.
///
/// # Safety
/// `root` must be NUL-terminated; `options` readable; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ao_cache_new_file(
    root: *const c_char,
    options: *const AoCacheOptions,
    out: *mut *mut AoCache,
) -> AoStatus {
    guard(|| {
        let o = deref!(options);
        if root.is_null() || out.is_null() {
            return fail(AoStatus::NullPointer, "root or out is null");
        }
        let Ok(root) = unsafe { CStr::from_ptr(root) }.to_str() else {
            return fail(AoStatus::InvalidArgument, "root is not UTF-8");
        };
        let backend = match FileBackend::new(root) {
            Ok(b) => b,
            Err(e) => return fail(AoStatus::Storage, e.to_string()),
        };
        let throttle = (o.write_bw > 0.0).then(|| throttle_of(o));
        let engine: Box<dyn TransferEngine> =
            Box::new(ThreadedEngine::new(std::sync::Arc::new(backend), throttle));
        put(out, AoCache(TensorCache::new(engine, plan_of(o))))
    })
}

/// Drains outstanding transfers, then frees the cache.
#[no_mangle]
pub extern "C" fn ao_cache_free(cache: *mut AoCache) {
    free(cache)
}

/// Copy `len` bytes into a new tensor of the given shape. The shape's
/// element count must divide `len`.
///
/// # Safety
/// `data` must point to `len` readable bytes and `shape` to `ndim` values.
#[no_mangle]
pub unsafe extern "C" fn ao_tensor_new(
    data: *const u8,
    len: usize,
    shape: *const usize,
    ndim: usize,
    out: *mut *mut AoTensor,
) -> AoStatus {
    guard(|| {
        if out.is_null() || (data.is_null() && len > 0) || (shape.is_null() && ndim > 0) {
            return fail(AoStatus::NullPointer, "data, shape or out is null");
        }
        let bytes = if len == 0 {
            Vec::new()
        } else {
            unsafe { std::slice::from_raw_parts(data, len) }.to_vec()
        };
        let dims = if ndim == 0 {
            Vec::new()
        } else {
            unsafe { std::slice::from_raw_parts(shape, ndim) }.to_vec()
        };
        let numel: usize = dims.iter().product();
        if numel == 0 && len > 0 || numel > 0 && !len.is_multiple_of(numel) {
            return fail(
                AoStatus::InvalidArgument,
                "shape does not match byte length",
            );
        }
        put(out, AoTensor(TensorHandle::new(bytes, dims)))
    })
}

#[no_mangle]
pub extern "C" fn ao_tensor_free(tensor: *mut AoTensor) {
    free(tensor)
}

/// Borrow the tensor's bytes. The pointer lives as long as the tensor.
///
/// # Safety
/// `tensor` must come from this library; `data` and `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ao_tensor_data(
    tensor: *const AoTensor,
    data: *mut *const u8,
    len: *mut usize,
) -> AoStatus {
    guard(|| {
        let t = &deref!(tensor).0;
        let (d, l) = (deref_mut!(data), deref_mut!(len));
        let b = t.bytes();
        *d = b.as_ptr();
        *l = b.len();
        AoStatus::Ok
    })
}

/// CRC-32 of the tensor's bytes.
///
/// # Safety
/// `tensor` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ao_tensor_checksum(tensor: *const AoTensor, out: *mut u32) -> AoStatus {
    guard(|| {
        *deref_mut!(out) = deref!(tensor).0.checksum();
        AoStatus::Ok
    })
}

/// Register a tensor as a weight so packing passes it through.
///
/// # Safety
/// Both handles must come from this library.
#[no_mangle]
pub unsafe extern "C" fn ao_cache_register_weight(
    cache: *mut AoCache,
    tensor: *const AoTensor,
) -> AoStatus {
    guard(|| {
        let t = &deref!(tensor).0;
        deref_mut!(cache).0.register_weight(t);
        AoStatus::Ok
    })
}

/// Hand a tensor saved for backward to the cache. The tensor handle stays
/// owned by the caller.
///
/// # Safety
/// Handles must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ao_cache_pack(
    cache: *mut AoCache,
    tensor: *const AoTensor,
    out: *mut *mut AoPacked,
) -> AoStatus {
    guard(|| {
        let t = deref!(tensor).0.clone();
        let c = deref_mut!(cache);
        if out.is_null() {
            return fail(AoStatus::NullPointer, "out is null");
        }
        match c.0.pack(t) {
            Ok(p) => put(out, AoPacked(p)),
            Err(e) => fail(AoStatus::Cache, e.to_string()),
        }
    })
}

/// Get the tensor back, waiting for its reload if needed. The returned
/// tensor is a new handle the caller frees.
///
/// # Safety
/// Handles must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ao_cache_unpack(
    cache: *mut AoCache,
    packed: *const AoPacked,
    out: *mut *mut AoTensor,
) -> AoStatus {
    guard(|| {
        let p = &deref!(packed).0;
        let c = deref_mut!(cache);
        if out.is_null() {
            return fail(AoStatus::NullPointer, "out is null");
        }
        match c.0.unpack(p) {
            Ok(t) => put(out, AoTensor(t)),
            Err(e) => fail(AoStatus::Cache, e.to_string()),
        }
    })
}

#[no_mangle]
pub extern "C" fn ao_packed_free(packed: *mut AoPacked) {
    free(packed)
}

/// # Safety
/// `cache` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn ao_cache_forward_enter(cache: *mut AoCache, module: u64) -> AoStatus {
    guard(|| {
        deref_mut!(cache)
            .0
            .on_forward_module_enter(ModuleId(module));
        AoStatus::Ok
    })
}

/// # Safety
/// `cache` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn ao_cache_forward_exit(cache: *mut AoCache, module: u64) -> AoStatus {
    guard(
        || match deref_mut!(cache).0.on_forward_module_exit(ModuleId(module)) {
            Ok(()) => AoStatus::Ok,
            Err(e) => fail(AoStatus::Cache, e.to_string()),
        },
    )
}

/// Entering a module's backward also queues the prefetch of what it and
/// the modules before it offloaded.
///
/// # Safety
/// `cache` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn ao_cache_backward_enter(cache: *mut AoCache, module: u64) -> AoStatus {
    guard(|| {
        match deref_mut!(cache)
            .0
            .on_backward_module_enter(ModuleId(module))
        {
            Ok(()) => AoStatus::Ok,
            Err(e) => fail(AoStatus::Cache, e.to_string()),
        }
    })
}

/// # Safety
/// `cache` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn ao_cache_backward_exit(cache: *mut AoCache, module: u64) -> AoStatus {
    guard(|| {
        match deref_mut!(cache)
            .0
            .on_backward_module_exit(ModuleId(module))
        {
            Ok(()) => AoStatus::Ok,
            Err(e) => fail(AoStatus::Cache, e.to_string()),
        }
    })
}

/// Mark the beginning (`begin` true) or end of a training stage.
///
/// # Safety
/// `cache` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn ao_cache_stage(
    cache: *mut AoCache,
    stage: AoStage,
    begin: bool,
) -> AoStatus {
    guard(|| {
        let kind = match stage {
            AoStage::Forward => StageKind::Forward,
            AoStage::Backward => StageKind::Backward,
            AoStage::WeightUpdate => StageKind::WeightUpdate,
        };
        let edge = if begin {
            StageEdge::Begin
        } else {
            StageEdge::End
        };
        deref_mut!(cache).0.stage_hint(kind, edge);
        AoStatus::Ok
    })
}

/// # Safety
/// `cache` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn ao_cache_switch_microbatch(cache: *mut AoCache, index: u32) -> AoStatus {
    guard(|| {
        deref_mut!(cache).0.switch_microbatch(index);
        AoStatus::Ok
    })
}

/// Let `seconds` of compute pass. Simulated caches move their clock; file
/// caches sleep.
///
/// # Safety
/// `cache` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn ao_cache_advance(cache: *mut AoCache, seconds: f64) -> AoStatus {
    guard(|| {
        if !(seconds >= 0.0 && seconds.is_finite()) {
            return fail(AoStatus::InvalidArgument, "seconds must be finite and >= 0");
        }
        deref_mut!(cache).0.advance(seconds);
        AoStatus::Ok
    })
}

/// Finish the step: wait for transfers and release everything left.
///
/// # Safety
/// `cache` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn ao_cache_end_step(cache: *mut AoCache) -> AoStatus {
    guard(|| match deref_mut!(cache).0.end_step() {
        Ok(()) => AoStatus::Ok,
        Err(e) => fail(AoStatus::Cache, e.to_string()),
    })
}

/// # Safety
/// `cache` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ao_cache_stats(cache: *const AoCache, out: *mut AoCacheStats) -> AoStatus {
    guard(|| {
        let c = &deref!(cache).0;
        let out = deref_mut!(out);
        let s = c.stats();
        let io = c.engine().stats();
        *out = AoCacheStats {
            packed: s.packed,
            pass_through: s.pass_through,
            kept: s.kept,
            offloaded: s.offload_submitted,
            offloaded_bytes: s.offload_submitted_bytes,
            forwarded: s.forwarded,
            loads: s.loads_issued,
            released: s.released,
            backend_writes: io.writes,
            backend_reads: io.reads,
        };
        AoStatus::Ok
    })
}
