//! Worker-thread engine: one thread per lane, jobs served in FIFO order.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::{
    Backend, IoEvent, IoEventKind, IoKind, IoStats, Payload, StorageError, StorageKey,
    ThrottleSpec, Ticket, TransferEngine,
};

struct Job {
    ticket: Ticket,
    payload: Option<Payload>,
}

struct Shared {
    epoch: Instant,
    backend: Arc<dyn Backend>,
    throttle: Option<ThrottleSpec>,
    pending_stores: Mutex<HashMap<StorageKey, Ticket>>,
    events: Mutex<Vec<IoEvent>>,
    stats: Mutex<IoStats>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl Shared {
    fn now(&self) -> f64 {
        self.epoch.elapsed().as_secs_f64()
    }

    fn event(&self, time: f64, kind: IoEventKind, ticket: &Ticket) {
        lock(&self.events).push(IoEvent {
            time,
            kind,
            key: ticket.key(),
            bytes: ticket.bytes(),
        });
    }

    fn serve(&self, kind: IoKind, rx: Receiver<Job>) {
        for job in rx {
            let start = self.now();
            if !job.ticket.begin(start) {
                continue;
            }
            let (start_kind, end_kind) = match kind {
                IoKind::Store => (IoEventKind::StoreStart, IoEventKind::StoreEnd),
                IoKind::Load => (IoEventKind::LoadStart, IoEventKind::LoadEnd),
            };
            self.event(start, start_kind, &job.ticket);
            let key = job.ticket.key();
            let outcome = match kind {
                IoKind::Store => {
                    let data = job.payload.as_ref().expect("store carries bytes");
                    self.backend.put(&key, (**data).as_ref()).map(|_| None)
                }
                IoKind::Load => self.backend.get(&key).map(Some),
            };
            if let Some(spec) = self.throttle {
                let target = spec.duration(kind, job.ticket.bytes());
                let spent = self.now() - start;
                if target.is_finite() && target > spent {
                    thread::sleep(Duration::from_secs_f64(target - spent));
                }
            }
            if outcome.is_ok() {
                let mut s = lock(&self.stats);
                match kind {
                    IoKind::Store => {
                        s.writes += 1;
                        s.bytes_written += job.ticket.bytes();
                    }
                    IoKind::Load => {
                        s.reads += 1;
                        s.bytes_read += job.ticket.bytes();
                    }
                }
            }
            if kind == IoKind::Store {
                lock(&self.pending_stores).remove(&key);
            }
            let end = self.now();
            job.ticket.finish(end, outcome);
            self.event(end, end_kind, &job.ticket);
        }
    }
}

/// Real I/O against a backend on two worker threads. Timestamps are wall
/// clock seconds since construction; an optional throttle stretches each job
/// to at least its modeled duration.
pub struct ThreadedEngine {
    shared: Arc<Shared>,
    store_tx: Option<Sender<Job>>,
    load_tx: Option<Sender<Job>>,
    workers: Vec<JoinHandle<()>>,
    outstanding: Vec<Ticket>,
}

impl ThreadedEngine {
    pub fn new(backend: Arc<dyn Backend>, throttle: Option<ThrottleSpec>) -> Self {
        let shared = Arc::new(Shared {
            epoch: Instant::now(),
            backend,
            throttle,
            pending_stores: Mutex::default(),
            events: Mutex::default(),
            stats: Mutex::default(),
        });
        let mut workers = Vec::new();
        let mut spawn = |kind: IoKind, name: &str| {
            let (tx, rx) = mpsc::channel();
            let s = Arc::clone(&shared);
            workers.push(
                thread::Builder::new()
                    .name(name.into())
                    .spawn(move || s.serve(kind, rx))
                    .expect("spawn storage worker"),
            );
            tx
        };
        let store_tx = spawn(IoKind::Store, "actoffload-store");
        let load_tx = spawn(IoKind::Load, "actoffload-load");
        Self {
            shared,
            store_tx: Some(store_tx),
            load_tx: Some(load_tx),
            workers,
            outstanding: Vec::new(),
        }
    }

    pub fn backend(&self) -> &dyn Backend {
        self.shared.backend.as_ref()
    }

    fn submit(&mut self, kind: IoKind, job: Job) {
        self.outstanding.retain(|t| !t.is_terminal());
        self.outstanding.push(job.ticket.clone());
        let tx = match kind {
            IoKind::Store => &self.store_tx,
            IoKind::Load => &self.load_tx,
        };
        tx.as_ref()
            .expect("engine is running")
            .send(job)
            .expect("storage worker alive");
    }
}

impl TransferEngine for ThreadedEngine {
    fn now(&self) -> f64 {
        self.shared.now()
    }

    fn advance(&mut self, dt: f64) {
        if dt > 0.0 && dt.is_finite() {
            thread::sleep(Duration::from_secs_f64(dt));
        }
    }

    fn store(&mut self, key: StorageKey, data: Payload) -> Result<Ticket, StorageError> {
        let bytes = (*data).as_ref().len() as u64;
        let ticket = {
            let mut pending = lock(&self.shared.pending_stores);
            if pending.contains_key(&key) || self.shared.backend.contains(&key) {
                return Err(StorageError::DuplicateId(key));
            }
            if let Some(q) = self.shared.backend.quota() {
                let reserved: u64 = pending.values().map(Ticket::bytes).sum();
                let used = self.shared.backend.used_bytes() + reserved;
                if used + bytes > q {
                    return Err(StorageError::BackendFull {
                        requested: bytes,
                        available: q.saturating_sub(used),
                    });
                }
            }
            let t = Ticket::new(key, IoKind::Store, bytes, self.shared.now());
            pending.insert(key, t.clone());
            t
        };
        self.submit(
            IoKind::Store,
            Job {
                ticket: ticket.clone(),
                payload: Some(data),
            },
        );
        Ok(ticket)
    }

    fn load(&mut self, key: &StorageKey) -> Result<Ticket, StorageError> {
        if lock(&self.shared.pending_stores).contains_key(key) {
            return Err(StorageError::NotYetDurable(*key));
        }
        let bytes = self
            .shared
            .backend
            .size_of(key)
            .ok_or(StorageError::NotFound(*key))?;
        let ticket = Ticket::new(*key, IoKind::Load, bytes, self.shared.now());
        self.submit(
            IoKind::Load,
            Job {
                ticket: ticket.clone(),
                payload: None,
            },
        );
        Ok(ticket)
    }

    fn wait(&mut self, ticket: &Ticket) {
        ticket.wait_blocking();
    }

    fn cancel(&mut self, ticket: &Ticket) -> bool {
        if !ticket.try_cancel() {
            return false;
        }
        if ticket.kind() == IoKind::Store {
            lock(&self.shared.pending_stores).remove(&ticket.key());
        }
        lock(&self.shared.stats).cancelled += 1;
        true
    }

    fn delete(&mut self, key: &StorageKey) -> Result<(), StorageError> {
        self.shared.backend.remove(key)
    }

    fn drain(&mut self) {
        for t in std::mem::take(&mut self.outstanding) {
            t.wait_blocking();
        }
    }

    fn stats(&self) -> IoStats {
        *lock(&self.shared.stats)
    }

    fn take_events(&mut self) -> Vec<IoEvent> {
        std::mem::take(&mut *lock(&self.shared.events))
    }

    fn root(&self) -> Option<PathBuf> {
        self.shared.backend.root().map(|p| p.to_path_buf())
    }
}

impl Drop for ThreadedEngine {
    fn drop(&mut self) {
        self.store_tx.take();
        self.load_tx.take();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}
