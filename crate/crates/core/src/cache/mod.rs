//! The activation cache.
//!
//! The training loop calls [`TensorCache::pack`] for every tensor saved for
//! backward and [`TensorCache::unpack`] when backward needs it again. In
//! between, the cache decides per tensor whether to keep it in device memory
//! or spill it through a [`TransferEngine`], prefetches spilled tensors in
//! reverse module order once backward starts, and hands back still-in-flight
//! copies directly instead of reading them from storage.
//!
//! The loop also reports module boundaries and stage changes through the
//! hint methods. Module scopes decide when a tensor is no longer needed:
//! a tensor belongs to the innermost module active when it was packed (and
//! to any other module that packs it again), and is released once every
//! such module has finished its backward.

mod plan;
mod tensor;

pub use plan::{planner_budget, OffloadPlan, DEFAULT_MIN_TENSOR_ELEMS};
pub use tensor::{get_id, Buffer, Device, TensorHandle, TensorId};

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::storage::{
    IoEventKind, Payload, StorageError, StorageKey, Ticket, TicketState, TransferEngine,
};
use crate::trace::{EventKind, EventTrace, TraceEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModuleId(pub u64);

impl fmt::Display for ModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}", self.0)
    }
}

/// A module as seen by one micro-batch's forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModuleScope {
    pub module_id: ModuleId,
    pub microbatch: u32,
    /// Position in the micro-batch's forward completion order.
    pub forward_order: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RecordState {
    KeptInMemory,
    Offloading,
    Offloaded,
    Loading,
    Loaded,
    Forwarded,
}

impl RecordState {
    /// Whether device memory holds the tensor.
    pub fn is_resident(self) -> bool {
        !matches!(self, RecordState::Offloaded | RecordState::Loading)
    }
}

#[derive(Debug, Clone)]
pub struct TensorRecord {
    pub id: TensorId,
    pub size: u64,
    pub state: RecordState,
    pub scopes: BTreeSet<ModuleId>,
    pub storage_key: Option<StorageKey>,
    pub microbatch: u32,
    pub label: String,
    resident: Option<TensorHandle>,
    ticket: Option<Ticket>,
}

#[derive(Debug, Clone)]
pub enum PackedRef {
    /// The tensor was not tracked; here it is, untouched.
    PassThrough(TensorHandle),
    Tracked(TensorId),
}

impl PackedRef {
    pub fn id(&self) -> Option<&TensorId> {
        match self {
            PackedRef::Tracked(id) => Some(id),
            PackedRef::PassThrough(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StageKind {
    Forward,
    Backward,
    WeightUpdate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StageEdge {
    Begin,
    End,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CacheError {
    #[error("no module scope is active; module hints are missing")]
    UnknownScope,
    #[error("scope mismatch: expected {expected:?}, got {got}")]
    MismatchedScope {
        expected: Option<ModuleId>,
        got: ModuleId,
    },
    #[error("{0} was never packed")]
    UnknownId(TensorId),
    #[error("{0} was released before it was unpacked")]
    LostTensor(TensorId),
    #[error(transparent)]
    Storage(#[from] StorageError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub packed: u64,
    pub pass_through: u64,
    pub kept: u64,
    pub offload_submitted: u64,
    pub offload_submitted_bytes: u64,
    pub forwarded: u64,
    pub stores_cancelled: u64,
    pub loads_issued: u64,
    pub released: u64,
}

#[derive(Debug, Default)]
struct MicroBatchRecord {
    forward_order: Vec<ModuleId>,
    by_scope: HashMap<ModuleId, Vec<TensorId>>,
    prefetched: HashSet<ModuleId>,
    last_packed: Option<ModuleId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    microbatch: u32,
    tick: u64,
    shape: Vec<usize>,
    bytes: u64,
    label: String,
}

#[derive(Debug, Serialize)]
struct StepManifest<'a> {
    step: u64,
    entries: Vec<&'a ManifestEntry>,
}

pub struct TensorCache<E: TransferEngine> {
    engine: E,
    plan: OffloadPlan,
    weights: HashSet<u64>,
    records: BTreeMap<TensorId, TensorRecord>,
    released: HashSet<TensorId>,
    active_io: BTreeSet<TensorId>,
    orphans: Vec<Ticket>,
    current_mb: u32,
    microbatches: HashMap<u32, MicroBatchRecord>,
    forward_stack: Vec<ModuleId>,
    backward_stack: Vec<ModuleId>,
    in_backward: bool,
    forward_just_ended: bool,
    step_open: bool,
    offloaded_accum: u64,
    keep_hints: HashMap<u32, ModuleId>,
    events: Vec<TraceEvent>,
    key_labels: HashMap<StorageKey, String>,
    manifest: BTreeMap<StorageKey, ManifestEntry>,
    step: u64,
    stats: CacheStats,
}

impl<E: TransferEngine> TensorCache<E> {
    pub fn new(engine: E, plan: OffloadPlan) -> Self {
        Self {
            engine,
            plan,
            weights: HashSet::new(),
            records: BTreeMap::new(),
            released: HashSet::new(),
            active_io: BTreeSet::new(),
            orphans: Vec::new(),
            current_mb: 0,
            microbatches: HashMap::new(),
            forward_stack: Vec::new(),
            backward_stack: Vec::new(),
            in_backward: false,
            forward_just_ended: false,
            step_open: false,
            offloaded_accum: 0,
            keep_hints: HashMap::new(),
            events: Vec::new(),
            key_labels: HashMap::new(),
            manifest: BTreeMap::new(),
            step: 0,
            stats: CacheStats::default(),
        }
    }

    pub fn plan(&self) -> &OffloadPlan {
        &self.plan
    }

    pub fn engine(&self) -> &E {
        &self.engine
    }

    pub fn engine_mut(&mut self) -> &mut E {
        &mut self.engine
    }

    pub fn into_engine(self) -> E {
        self.engine
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    pub fn now(&self) -> f64 {
        self.engine.now()
    }

    pub fn in_backward(&self) -> bool {
        self.in_backward
    }

    /// Bytes offloaded so far in the current step.
    pub fn offloaded_this_step(&self) -> u64 {
        self.offloaded_accum
    }

    pub fn record(&self, id: &TensorId) -> Option<&TensorRecord> {
        self.records.get(id)
    }

    pub fn live_records(&self) -> usize {
        self.records.len()
    }

    /// Device bytes currently held by tracked tensors.
    pub fn resident_bytes(&self) -> u64 {
        self.records
            .values()
            .filter(|r| r.state.is_resident())
            .map(|r| r.size)
            .sum()
    }

    /// Log an event under the current time, e.g. compute boundaries.
    pub fn note(&mut self, kind: EventKind, subject: impl Into<String>, bytes: u64) {
        let time = self.engine.now();
        self.events.push(TraceEvent {
            time,
            kind,
            subject: subject.into(),
            bytes,
        });
    }

    /// Let compute time pass on the engine clock.
    pub fn advance(&mut self, dt: f64) {
        self.engine.advance(dt);
    }

    pub fn get_id(&self, handle: &TensorHandle) -> TensorId {
        get_id(handle)
    }

    /// Exclude a weight, and anything sharing its storage, from tracking.
    pub fn register_weight(&mut self, handle: &TensorHandle) {
        self.weights.insert(handle.storage_tick());
    }

    pub fn is_weight(&self, handle: &TensorHandle) -> bool {
        self.weights.contains(&handle.storage_tick())
    }

    fn mb(&mut self) -> &mut MicroBatchRecord {
        self.microbatches.entry(self.current_mb).or_default()
    }

    pub fn pack(&mut self, handle: TensorHandle) -> Result<PackedRef, CacheError> {
        self.pack_labeled(handle, None)
    }

    /// Like [`pack`](Self::pack), naming the tensor in the trace.
    pub fn pack_labeled(
        &mut self,
        handle: TensorHandle,
        label: Option<&str>,
    ) -> Result<PackedRef, CacheError> {
        self.reap();
        if self.is_weight(&handle)
            || handle.device() == Device::Host
            || (handle.numel() as u64) < self.plan.min_tensor_elems
        {
            self.stats.pass_through += 1;
            return Ok(PackedRef::PassThrough(handle));
        }
        let scope = *self.forward_stack.last().ok_or(CacheError::UnknownScope)?;
        let id = get_id(&handle);
        let recording = !self.in_backward;
        let mb = self.mb();
        let ids = mb.by_scope.entry(scope).or_default();
        if !ids.contains(&id) {
            ids.push(id.clone());
        }
        if recording {
            mb.last_packed = Some(scope);
        }
        if let Some(rec) = self.records.get_mut(&id) {
            rec.scopes.insert(scope);
            return Ok(PackedRef::Tracked(id));
        }
        self.released.remove(&id);
        self.stats.packed += 1;

        let size = handle.size_bytes();
        let label = label.map_or_else(|| id.to_string(), str::to_string);
        self.note(EventKind::Alloc, label.clone(), size);
        let keep = self.offloaded_accum >= self.plan.budget_bytes
            || self.in_backward
            || (self.plan.keep_last_module
                && self.keep_hints.get(&self.current_mb) == Some(&scope));
        let mut rec = TensorRecord {
            id: id.clone(),
            size,
            state: RecordState::KeptInMemory,
            scopes: BTreeSet::from([scope]),
            storage_key: None,
            microbatch: self.current_mb,
            label,
            resident: None,
            ticket: None,
        };
        if keep {
            self.stats.kept += 1;
        } else {
            let key = StorageKey::new(self.current_mb, id.tick, &id.shape);
            let payload: Payload = handle.payload();
            let ticket = self.engine.store(key, payload)?;
            self.offloaded_accum += size;
            self.stats.offload_submitted += 1;
            self.stats.offload_submitted_bytes += size;
            self.key_labels.insert(key, rec.label.clone());
            self.manifest.insert(
                key,
                ManifestEntry {
                    file: key.file_name(),
                    microbatch: self.current_mb,
                    tick: id.tick,
                    shape: id.shape.clone(),
                    bytes: size,
                    label: rec.label.clone(),
                },
            );
            rec.state = RecordState::Offloading;
            rec.storage_key = Some(key);
            rec.ticket = Some(ticket);
            self.active_io.insert(id.clone());
        }
        rec.resident = Some(handle);
        self.records.insert(id.clone(), rec);
        Ok(PackedRef::Tracked(id))
    }

    pub fn unpack(&mut self, packed: &PackedRef) -> Result<TensorHandle, CacheError> {
        let id = match packed {
            PackedRef::PassThrough(h) => return Ok(h.clone()),
            PackedRef::Tracked(id) => id,
        };
        self.reap();
        let state = match self.records.get(id) {
            Some(r) => r.state,
            None if self.released.contains(id) => return Err(CacheError::LostTensor(id.clone())),
            None => return Err(CacheError::UnknownId(id.clone())),
        };
        match state {
            RecordState::KeptInMemory | RecordState::Loaded | RecordState::Forwarded => {}
            RecordState::Offloading => self.forward(id),
            RecordState::Offloaded => {
                self.start_load(id)?;
                self.finish_load(id)?;
            }
            RecordState::Loading => self.finish_load(id)?,
        }
        let rec = &self.records[id];
        Ok(rec.resident.clone().expect("resident after unpack"))
    }

    /// Serve a tensor from its in-flight copy. The store is left to finish,
    /// as a FIFO writer would, and its file is deleted once it lands.
    fn forward(&mut self, id: &TensorId) {
        let rec = self.records.get_mut(id).expect("record exists");
        rec.state = RecordState::Forwarded;
        self.stats.forwarded += 1;
        self.active_io.remove(id);
        if let Some(t) = rec.ticket.take() {
            self.orphans.push(t);
        }
    }

    fn start_load(&mut self, id: &TensorId) -> Result<(), CacheError> {
        let rec = self.records.get_mut(id).expect("record exists");
        let key = rec.storage_key.expect("offloaded tensors have a key");
        let ticket = self.engine.load(&key)?;
        rec.ticket = Some(ticket);
        rec.state = RecordState::Loading;
        self.active_io.insert(id.clone());
        self.stats.loads_issued += 1;
        Ok(())
    }

    fn finish_load(&mut self, id: &TensorId) -> Result<(), CacheError> {
        let ticket = self.records[id]
            .ticket
            .clone()
            .expect("loading has a ticket");
        self.engine.wait(&ticket);
        self.reap();
        match self.records[id].state {
            RecordState::Loaded => Ok(()),
            _ => Err(ticket
                .result()
                .err()
                .unwrap_or(StorageError::Io("load failed".into()))
                .into()),
        }
    }

    /// Move finished transfers into their next state.
    fn reap(&mut self) {
        let ids: Vec<TensorId> = self
            .active_io
            .iter()
            .filter(|id| {
                self.records[*id]
                    .ticket
                    .as_ref()
                    .is_some_and(Ticket::is_terminal)
            })
            .cloned()
            .collect();
        for id in ids {
            let rec = self.records.get_mut(&id).expect("active record exists");
            let ticket = rec.ticket.take().expect("filtered on ticket");
            let end = ticket.end_time().unwrap_or(0.0);
            match (rec.state, ticket.state()) {
                (RecordState::Offloading, TicketState::Done) => {
                    rec.state = RecordState::Offloaded;
                    rec.resident = None;
                    self.events.push(TraceEvent {
                        time: end,
                        kind: EventKind::Free,
                        subject: rec.label.clone(),
                        bytes: rec.size,
                    });
                }
                (RecordState::Offloading, _) => {
                    // the write failed or was dropped; the copy stays put
                    rec.state = RecordState::KeptInMemory;
                    rec.storage_key = None;
                }
                (RecordState::Loading, TicketState::Done) => {
                    let data = ticket.take_data().unwrap_or_default();
                    rec.resident = Some(TensorHandle::restored(data, &rec.id));
                    rec.state = RecordState::Loaded;
                    self.events.push(TraceEvent {
                        time: ticket.start_time().unwrap_or(end),
                        kind: EventKind::Alloc,
                        subject: rec.label.clone(),
                        bytes: rec.size,
                    });
                }
                (RecordState::Loading, _) => {
                    // leave it loading; unpack reports the failure
                    rec.ticket = Some(ticket);
                    continue;
                }
                _ => {}
            }
            self.active_io.remove(&id);
        }
        let engine = &mut self.engine;
        self.orphans.retain(|t| {
            if !t.is_terminal() {
                return true;
            }
            if t.state() == TicketState::Done {
                let _ = engine.delete(&t.key());
            }
            false
        });
    }

    fn release(&mut self, id: &TensorId) {
        let Some(mut rec) = self.records.remove(id) else {
            return;
        };
        self.released.insert(id.clone());
        self.active_io.remove(id);
        self.stats.released += 1;
        if rec.state == RecordState::Loading {
            if let Some(t) = &rec.ticket {
                self.engine.wait(t);
                if t.state() == TicketState::Done {
                    self.events.push(TraceEvent {
                        time: t.start_time().unwrap_or(0.0),
                        kind: EventKind::Alloc,
                        subject: rec.label.clone(),
                        bytes: rec.size,
                    });
                    rec.state = RecordState::Loaded;
                }
            }
        }
        if rec.state == RecordState::Offloading {
            if let Some(t) = rec.ticket.take() {
                if self.engine.cancel(&t) {
                    self.stats.stores_cancelled += 1;
                    rec.storage_key = None;
                } else {
                    self.orphans.push(t);
                    rec.storage_key = None;
                }
            }
        }
        if rec.state.is_resident() {
            self.note(EventKind::Free, rec.label.clone(), rec.size);
        }
        if matches!(rec.state, RecordState::Offloaded | RecordState::Loaded) {
            if let Some(k) = rec.storage_key {
                let _ = self.engine.delete(&k);
            }
        }
    }

    pub fn on_forward_module_enter(&mut self, module: ModuleId) {
        self.forward_stack.push(module);
    }

    pub fn on_forward_module_exit(&mut self, module: ModuleId) -> Result<(), CacheError> {
        match self.forward_stack.last() {
            Some(&top) if top == module => {
                self.forward_stack.pop();
            }
            top => {
                return Err(CacheError::MismatchedScope {
                    expected: top.copied(),
                    got: module,
                })
            }
        }
        if !self.in_backward {
            self.mb().forward_order.push(module);
        }
        Ok(())
    }

    /// Forward completion order of the current micro-batch.
    pub fn forward_order(&self) -> Vec<ModuleScope> {
        self.microbatches
            .get(&self.current_mb)
            .map(|m| {
                m.forward_order
                    .iter()
                    .enumerate()
                    .map(|(i, &module_id)| ModuleScope {
                        module_id,
                        microbatch: self.current_mb,
                        forward_order: i as u64,
                    })
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn on_backward_module_enter(&mut self, module: ModuleId) -> Result<(), CacheError> {
        self.reap();
        self.backward_stack.push(module);
        let mb = self.microbatches.entry(self.current_mb).or_default();
        let Some(pos) = mb.forward_order.iter().rposition(|&m| m == module) else {
            return Ok(());
        };
        let depth = self
            .plan
            .prefetch_depth
            .map_or(usize::MAX, |d| d.saturating_add(1));
        let upcoming: Vec<ModuleId> = mb.forward_order[..=pos]
            .iter()
            .rev()
            .take(depth)
            .copied()
            .filter(|m| mb.prefetched.insert(*m))
            .collect();
        for m in upcoming {
            let ids: Vec<TensorId> = self
                .mb()
                .by_scope
                .get(&m)
                .map(|v| v.iter().rev().cloned().collect())
                .unwrap_or_default();
            for id in ids {
                match self.records.get(&id).map(|r| r.state) {
                    Some(RecordState::Offloaded) => self.start_load(&id)?,
                    Some(RecordState::Offloading) => self.forward(&id),
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn on_backward_module_exit(&mut self, module: ModuleId) -> Result<(), CacheError> {
        match self.backward_stack.last() {
            Some(&top) if top == module => {
                self.backward_stack.pop();
            }
            top => {
                return Err(CacheError::MismatchedScope {
                    expected: top.copied(),
                    got: module,
                })
            }
        }
        self.reap();
        let ids = self.mb().by_scope.remove(&module).unwrap_or_default();
        for id in ids {
            let done = match self.records.get_mut(&id) {
                Some(rec) => {
                    rec.scopes.remove(&module);
                    rec.scopes.is_empty()
                }
                None => false,
            };
            if done {
                self.release(&id);
            }
        }
        Ok(())
    }

    pub fn switch_microbatch(&mut self, index: u32) {
        if index != self.current_mb {
            self.forward_just_ended = false;
            self.current_mb = index;
        }
        self.microbatches.entry(index).or_default();
    }

    pub fn current_microbatch(&self) -> u32 {
        self.current_mb
    }

    pub fn stage_hint(&mut self, kind: StageKind, edge: StageEdge) {
        self.reap();
        match (kind, edge) {
            (StageKind::Forward, StageEdge::Begin) => {
                if !self.step_open {
                    self.step_open = true;
                    self.offloaded_accum = 0;
                }
                self.in_backward = false;
                self.forward_just_ended = false;
            }
            (StageKind::Forward, StageEdge::End) => {
                self.forward_just_ended = true;
                self.write_manifest();
            }
            (StageKind::Backward, StageEdge::Begin) => {
                if self.forward_just_ended && self.plan.keep_last_module {
                    self.keep_last_module();
                }
                self.forward_just_ended = false;
                self.in_backward = true;
            }
            (StageKind::Backward, StageEdge::End) => {
                self.in_backward = false;
            }
            (StageKind::WeightUpdate, StageEdge::Begin) => {
                self.forward_just_ended = false;
            }
            (StageKind::WeightUpdate, StageEdge::End) => {
                self.step_open = false;
            }
        }
    }

    /// Backward follows this micro-batch's forward directly, so the module
    /// that ran last would be reloaded right away. Keep its tensors, and
    /// remember the module for later steps.
    fn keep_last_module(&mut self) {
        let mb = self.current_mb;
        let Some(last) = self.mb().last_packed else {
            return;
        };
        self.keep_hints.insert(mb, last);
        let ids = self.mb().by_scope.get(&last).cloned().unwrap_or_default();
        for id in ids {
            let Some(rec) = self.records.get_mut(&id) else {
                continue;
            };
            if rec.state != RecordState::Offloading {
                continue;
            }
            let t = rec.ticket.clone().expect("offloading has a ticket");
            if self.engine.cancel(&t) {
                rec.ticket = None;
                rec.state = RecordState::KeptInMemory;
                if let Some(k) = rec.storage_key.take() {
                    self.manifest.remove(&k);
                }
                self.offloaded_accum -= rec.size;
                self.stats.stores_cancelled += 1;
                self.stats.kept += 1;
                self.active_io.remove(&id);
            }
        }
    }

    fn write_manifest(&self) {
        let Some(root) = self.engine.root() else {
            return;
        };
        let dir = root.join("manifests");
        let doc = StepManifest {
            step: self.step,
            entries: self.manifest.values().collect(),
        };
        let _ = write_json(&dir, &format!("step_{}.json", self.step), &doc);
    }

    /// Finish the step: wait for outstanding I/O, release whatever is still
    /// tracked, and remove every file this step wrote.
    pub fn end_step(&mut self) -> Result<(), CacheError> {
        self.reap();
        self.engine.drain();
        self.reap();
        let left: Vec<TensorId> = self.records.keys().cloned().collect();
        for id in left {
            self.release(&id);
        }
        self.engine.drain();
        self.reap();
        self.write_manifest();
        self.manifest.clear();
        self.microbatches.clear();
        self.forward_stack.clear();
        self.backward_stack.clear();
        self.in_backward = false;
        self.forward_just_ended = false;
        self.step_open = false;
        self.offloaded_accum = 0;
        self.step += 1;
        Ok(())
    }

    /// Every event so far, cache and storage, in time order.
    pub fn take_trace(&mut self) -> EventTrace {
        self.reap();
        let mut events = std::mem::take(&mut self.events);
        for io in self.engine.take_events() {
            let kind = match io.kind {
                IoEventKind::StoreStart => EventKind::StoreStart,
                IoEventKind::StoreEnd => EventKind::StoreEnd,
                IoEventKind::LoadStart => EventKind::LoadStart,
                IoEventKind::LoadEnd => EventKind::LoadEnd,
            };
            let subject = self
                .key_labels
                .get(&io.key)
                .cloned()
                .unwrap_or_else(|| io.key.file_name());
            events.push(TraceEvent {
                time: io.time,
                kind,
                subject,
                bytes: io.bytes,
            });
        }
        EventTrace::new(events)
    }
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
    std::fs::write(dir.join(name), text)
}
