//! Discrete-event model of the two FIFO lanes.
//!
//! Each lane serves jobs strictly in submission order. A job starts at
//! `max(enqueue_time, previous job's end)` and takes `bytes / bw + latency`.
//! Lanes only advance when the caller moves the clock, so a run is a pure
//! function of its inputs.

use std::collections::{HashMap, VecDeque};
use std::path::PathBuf;

use super::{
    Backend, IoEvent, IoEventKind, IoKind, IoStats, MemoryBackend, Payload, StorageError,
    StorageKey, ThrottleSpec, Ticket, TransferEngine,
};

struct Job {
    ticket: Ticket,
    payload: Option<Payload>,
    duration: f64,
}

#[derive(Default)]
struct Lane {
    busy_until: f64,
    queue: VecDeque<Job>,
}

impl Lane {
    /// When `ticket` would finish if nothing else is submitted.
    fn completion_time(&self, ticket: &Ticket) -> Option<f64> {
        let mut busy = self.busy_until;
        for job in &self.queue {
            let end = busy.max(job.ticket.enqueue_time()) + job.duration;
            if job.ticket.same_job(ticket) {
                return Some(end);
            }
            busy = end;
        }
        None
    }

    fn last_completion(&self) -> f64 {
        let mut busy = self.busy_until;
        for job in &self.queue {
            busy = busy.max(job.ticket.enqueue_time()) + job.duration;
        }
        busy
    }
}

pub struct VirtualEngine {
    clock: f64,
    throttle: ThrottleSpec,
    backend: Box<dyn Backend>,
    stores: Lane,
    loads: Lane,
    pending_stores: HashMap<StorageKey, Ticket>,
    reserved: u64,
    events: Vec<IoEvent>,
    stats: IoStats,
}

impl VirtualEngine {
    pub fn new(throttle: ThrottleSpec) -> Self {
        Self::with_backend(throttle, Box::new(MemoryBackend::new()))
    }

    pub fn with_backend(throttle: ThrottleSpec, backend: Box<dyn Backend>) -> Self {
        Self {
            clock: 0.0,
            throttle,
            backend,
            stores: Lane::default(),
            loads: Lane::default(),
            pending_stores: HashMap::new(),
            reserved: 0,
            events: Vec::new(),
            stats: IoStats::default(),
        }
    }

    pub fn throttle(&self) -> ThrottleSpec {
        self.throttle
    }

    pub fn backend(&self) -> &dyn Backend {
        self.backend.as_ref()
    }

    fn process(&mut self, until: f64) {
        self.process_lane(IoKind::Store, until);
        self.process_lane(IoKind::Load, until);
    }

    fn process_lane(&mut self, kind: IoKind, until: f64) {
        loop {
            let lane = match kind {
                IoKind::Store => &mut self.stores,
                IoKind::Load => &mut self.loads,
            };
            let Some(job) = lane.queue.front() else { break };
            let start = lane.busy_until.max(job.ticket.enqueue_time());
            if start > until {
                break;
            }
            let (start_kind, end_kind) = match kind {
                IoKind::Store => (IoEventKind::StoreStart, IoEventKind::StoreEnd),
                IoKind::Load => (IoEventKind::LoadStart, IoEventKind::LoadEnd),
            };
            if job.ticket.start_time().is_none() {
                job.ticket.begin(start);
                self.events.push(IoEvent {
                    time: start,
                    kind: start_kind,
                    key: job.ticket.key(),
                    bytes: job.ticket.bytes(),
                });
            }
            let end = start + job.duration;
            if end > until {
                break;
            }
            let job = lane.queue.pop_front().expect("front exists");
            lane.busy_until = end;
            let key = job.ticket.key();
            let outcome = match kind {
                IoKind::Store => {
                    let data = job.payload.as_ref().expect("store carries bytes");
                    let r = self.backend.put(&key, (**data).as_ref());
                    self.pending_stores.remove(&key);
                    self.reserved -= job.ticket.bytes();
                    if r.is_ok() {
                        self.stats.writes += 1;
                        self.stats.bytes_written += job.ticket.bytes();
                    }
                    r.map(|_| None)
                }
                IoKind::Load => {
                    let r = self.backend.get(&key);
                    if r.is_ok() {
                        self.stats.reads += 1;
                        self.stats.bytes_read += job.ticket.bytes();
                    }
                    r.map(Some)
                }
            };
            job.ticket.finish(end, outcome);
            self.events.push(IoEvent {
                time: end,
                kind: end_kind,
                key,
                bytes: job.ticket.bytes(),
            });
        }
    }
}

impl TransferEngine for VirtualEngine {
    fn now(&self) -> f64 {
        self.clock
    }

    fn advance(&mut self, dt: f64) {
        self.clock += dt.max(0.0);
        self.process(self.clock);
    }

    fn store(&mut self, key: StorageKey, data: Payload) -> Result<Ticket, StorageError> {
        if self.pending_stores.contains_key(&key) || self.backend.contains(&key) {
            return Err(StorageError::DuplicateId(key));
        }
        let bytes = (*data).as_ref().len() as u64;
        if let Some(q) = self.backend.quota() {
            let used = self.backend.used_bytes() + self.reserved;
            if used + bytes > q {
                return Err(StorageError::BackendFull {
                    requested: bytes,
                    available: q.saturating_sub(used),
                });
            }
        }
        let ticket = Ticket::new(key, IoKind::Store, bytes, self.clock);
        self.stores.queue.push_back(Job {
            ticket: ticket.clone(),
            payload: Some(data),
            duration: self.throttle.duration(IoKind::Store, bytes),
        });
        self.pending_stores.insert(key, ticket.clone());
        self.reserved += bytes;
        self.process(self.clock);
        Ok(ticket)
    }

    fn load(&mut self, key: &StorageKey) -> Result<Ticket, StorageError> {
        if self.pending_stores.contains_key(key) {
            return Err(StorageError::NotYetDurable(*key));
        }
        let bytes = self
            .backend
            .size_of(key)
            .ok_or(StorageError::NotFound(*key))?;
        let ticket = Ticket::new(*key, IoKind::Load, bytes, self.clock);
        self.loads.queue.push_back(Job {
            ticket: ticket.clone(),
            payload: None,
            duration: self.throttle.duration(IoKind::Load, bytes),
        });
        self.process(self.clock);
        Ok(ticket)
    }

    fn wait(&mut self, ticket: &Ticket) {
        if ticket.is_terminal() {
            return;
        }
        let lane = match ticket.kind() {
            IoKind::Store => &self.stores,
            IoKind::Load => &self.loads,
        };
        if let Some(end) = lane.completion_time(ticket) {
            self.clock = self.clock.max(end);
            self.process(self.clock);
        }
    }

    fn cancel(&mut self, ticket: &Ticket) -> bool {
        if ticket.start_time().is_some() || !ticket.try_cancel() {
            return false;
        }
        let lane = match ticket.kind() {
            IoKind::Store => &mut self.stores,
            IoKind::Load => &mut self.loads,
        };
        lane.queue.retain(|j| !j.ticket.same_job(ticket));
        if ticket.kind() == IoKind::Store {
            self.pending_stores.remove(&ticket.key());
            self.reserved -= ticket.bytes();
        }
        self.stats.cancelled += 1;
        true
    }

    fn delete(&mut self, key: &StorageKey) -> Result<(), StorageError> {
        self.backend.remove(key)
    }

    fn drain(&mut self) {
        let end = self
            .stores
            .last_completion()
            .max(self.loads.last_completion());
        self.clock = self.clock.max(end);
        self.process(self.clock);
    }

    fn stats(&self) -> IoStats {
        self.stats
    }

    fn take_events(&mut self) -> Vec<IoEvent> {
        std::mem::take(&mut self.events)
    }

    fn root(&self) -> Option<PathBuf> {
        self.backend.root().map(|p| p.to_path_buf())
    }
}
