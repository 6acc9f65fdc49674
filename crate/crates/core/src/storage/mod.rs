//! Persistence targets for offloaded tensors and the engines that move bytes
//! to and from them.
//!
//! A [`Backend`] is a flat key-value store (files on disk or a RAM map). A
//! [`TransferEngine`] owns a backend plus two FIFO job lanes, one for stores
//! and one for loads, and hands out [`Ticket`]s that the caller can poll or
//! wait on. Two engines exist: [`ThreadedEngine`] runs real worker threads
//! against wall-clock time, [`VirtualEngine`] is a single-threaded
//! discrete-event model of the same queues driven by a simulated clock.

mod backend;
mod threaded;
mod ticket;
mod virtual_engine;

pub use backend::{Backend, FileBackend, MemoryBackend, STORAGE_ROOT_ENV};
pub use threaded::ThreadedEngine;
pub use ticket::{IoKind, Ticket, TicketState};
pub use virtual_engine::VirtualEngine;

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bytes handed to a store job. The job keeps them alive until written.
pub type Payload = Arc<dyn AsRef<[u8]> + Send + Sync>;

/// Where one tensor lives in a backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StorageKey {
    pub microbatch: u32,
    pub tick: u64,
    pub shape_hash: u32,
}

impl StorageKey {
    pub fn new(microbatch: u32, tick: u64, shape: &[usize]) -> Self {
        let mut h = crc32fast::Hasher::new();
        for d in shape {
            h.update(&(*d as u64).to_le_bytes());
        }
        Self {
            microbatch,
            tick,
            shape_hash: h.finalize(),
        }
    }

    pub fn file_name(&self) -> String {
        format!(
            "{}_{}_{:08x}.bin",
            self.microbatch, self.tick, self.shape_hash
        )
    }
}

impl fmt::Display for StorageKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.file_name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StorageError {
    #[error("{0} not found")]
    NotFound(StorageKey),
    #[error("{0} is still being written")]
    NotYetDurable(StorageKey),
    #[error("{0} is already stored")]
    DuplicateId(StorageKey),
    #[error("backend full: {requested} bytes requested, {available} available")]
    BackendFull { requested: u64, available: u64 },
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for StorageError {
    fn from(e: std::io::Error) -> Self {
        StorageError::Io(e.to_string())
    }
}

/// Bandwidth model for one drive set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThrottleSpec {
    pub write_bw: f64,
    pub read_bw: f64,
    pub fixed_latency: f64,
}

impl ThrottleSpec {
    pub fn symmetric(bw: f64) -> Self {
        Self {
            write_bw: bw,
            read_bw: bw,
            fixed_latency: 0.0,
        }
    }

    /// Effectively unlimited bandwidth.
    pub fn unlimited() -> Self {
        Self::symmetric(f64::INFINITY)
    }

    pub fn duration(&self, kind: IoKind, bytes: u64) -> f64 {
        let bw = match kind {
            IoKind::Store => self.write_bw,
            IoKind::Load => self.read_bw,
        };
        bytes as f64 / bw + self.fixed_latency
    }

    pub fn is_valid(&self) -> bool {
        self.write_bw > 0.0 && self.read_bw > 0.0 && self.fixed_latency >= 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IoEventKind {
    StoreStart,
    StoreEnd,
    LoadStart,
    LoadEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IoEvent {
    pub time: f64,
    pub kind: IoEventKind,
    pub key: StorageKey,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoStats {
    pub writes: u64,
    pub reads: u64,
    pub bytes_written: u64,
    pub bytes_read: u64,
    pub cancelled: u64,
}

/// Asynchronous store/load queues over a backend.
pub trait TransferEngine {
    /// Seconds since the engine was created.
    fn now(&self) -> f64;
    /// Let `dt` seconds of compute pass.
    fn advance(&mut self, dt: f64);
    /// Enqueue a store. The key becomes loadable once the ticket is done.
    fn store(&mut self, key: StorageKey, data: Payload) -> Result<Ticket, StorageError>;
    /// Enqueue a load of a durable key.
    fn load(&mut self, key: &StorageKey) -> Result<Ticket, StorageError>;
    /// Block until the ticket is terminal.
    fn wait(&mut self, ticket: &Ticket);
    /// Cancel a job that has not started. Returns whether it was cancelled.
    fn cancel(&mut self, ticket: &Ticket) -> bool;
    fn delete(&mut self, key: &StorageKey) -> Result<(), StorageError>;
    /// Wait for every queued job.
    fn drain(&mut self);
    fn stats(&self) -> IoStats;
    /// Events recorded since the previous call.
    fn take_events(&mut self) -> Vec<IoEvent>;
    /// Directory backing the engine, if any.
    fn root(&self) -> Option<PathBuf>;

    /// Store, wait, and report the outcome.
    fn store_blocking(&mut self, key: StorageKey, data: Payload) -> Result<(), StorageError> {
        let t = self.store(key, data)?;
        self.wait(&t);
        t.result()
    }

    /// Load and wait for the bytes.
    fn load_blocking(&mut self, key: &StorageKey) -> Result<Vec<u8>, StorageError> {
        let t = self.load(key)?;
        self.wait(&t);
        t.result()?;
        Ok(t.take_data().unwrap_or_default())
    }
}

impl<E: TransferEngine + ?Sized> TransferEngine for Box<E> {
    fn now(&self) -> f64 {
        (**self).now()
    }
    fn advance(&mut self, dt: f64) {
        (**self).advance(dt)
    }
    fn store(&mut self, key: StorageKey, data: Payload) -> Result<Ticket, StorageError> {
        (**self).store(key, data)
    }
    fn load(&mut self, key: &StorageKey) -> Result<Ticket, StorageError> {
        (**self).load(key)
    }
    fn wait(&mut self, ticket: &Ticket) {
        (**self).wait(ticket)
    }
    fn cancel(&mut self, ticket: &Ticket) -> bool {
        (**self).cancel(ticket)
    }
    fn delete(&mut self, key: &StorageKey) -> Result<(), StorageError> {
        (**self).delete(key)
    }
    fn drain(&mut self) {
        (**self).drain()
    }
    fn stats(&self) -> IoStats {
        (**self).stats()
    }
    fn take_events(&mut self) -> Vec<IoEvent> {
        (**self).take_events()
    }
    fn root(&self) -> Option<PathBuf> {
        (**self).root()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_names_follow_layout() {
        let k = StorageKey::new(1, 42, &[16, 1024, 4096]);
        let name = k.file_name();
        assert!(name.starts_with("1_42_"));
        assert!(name.ends_with(".bin"));
        assert_ne!(
            k.shape_hash,
            StorageKey::new(1, 42, &[16, 4096, 1024]).shape_hash
        );
    }

    #[test]
    fn throttle_duration() {
        let t = ThrottleSpec {
            write_bw: 2.0 * (1u64 << 30) as f64,
            read_bw: 1.0,
            fixed_latency: 0.0,
        };
        assert_eq!(t.duration(IoKind::Store, 1 << 30), 0.5);
        assert!(!ThrottleSpec::symmetric(0.0).is_valid());
    }
}
