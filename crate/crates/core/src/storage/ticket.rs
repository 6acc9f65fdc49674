use std::sync::{Arc, Condvar, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};

use super::{StorageError, StorageKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IoKind {
    Store,
    Load,
}

/// Job lifecycle. Transitions only move forward:
/// `Pending -> InFlight -> Done | Failed`, or `Pending -> Cancelled`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TicketState {
    Pending,
    InFlight,
    Done,
    Failed,
    Cancelled,
}

impl TicketState {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            TicketState::Done | TicketState::Failed | TicketState::Cancelled
        )
    }
}

#[derive(Debug)]
struct Status {
    state: TicketState,
    start: Option<f64>,
    end: Option<f64>,
    data: Option<Vec<u8>>,
    error: Option<StorageError>,
}

#[derive(Debug)]
struct Inner {
    key: StorageKey,
    kind: IoKind,
    bytes: u64,
    enqueue_time: f64,
    status: Mutex<Status>,
    cv: Condvar,
}

/// Shared handle to one queued store or load.
#[derive(Debug, Clone)]
pub struct Ticket(Arc<Inner>);

impl Ticket {
    pub(crate) fn new(key: StorageKey, kind: IoKind, bytes: u64, enqueue_time: f64) -> Self {
        Ticket(Arc::new(Inner {
            key,
            kind,
            bytes,
            enqueue_time,
            status: Mutex::new(Status {
                state: TicketState::Pending,
                start: None,
                end: None,
                data: None,
                error: None,
            }),
            cv: Condvar::new(),
        }))
    }

    fn status(&self) -> MutexGuard<'_, Status> {
        self.0.status.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn key(&self) -> StorageKey {
        self.0.key
    }

    pub fn kind(&self) -> IoKind {
        self.0.kind
    }

    pub fn bytes(&self) -> u64 {
        self.0.bytes
    }

    pub fn enqueue_time(&self) -> f64 {
        self.0.enqueue_time
    }

    pub fn state(&self) -> TicketState {
        self.status().state
    }

    pub fn is_terminal(&self) -> bool {
        self.state().is_terminal()
    }

    pub fn start_time(&self) -> Option<f64> {
        self.status().start
    }

    pub fn end_time(&self) -> Option<f64> {
        self.status().end
    }

    /// `Ok` once done; the failure, or `NotFound` for a cancelled job.
    pub fn result(&self) -> Result<(), StorageError> {
        let s = self.status();
        match s.state {
            TicketState::Done => Ok(()),
            TicketState::Failed => Err(s
                .error
                .clone()
                .unwrap_or_else(|| StorageError::Io("job failed".into()))),
            TicketState::Cancelled => Err(StorageError::NotFound(self.0.key)),
            _ => Err(StorageError::NotYetDurable(self.0.key)),
        }
    }

    /// Bytes fetched by a finished load. Can be taken once.
    pub fn take_data(&self) -> Option<Vec<u8>> {
        self.status().data.take()
    }

    pub fn same_job(&self, other: &Ticket) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    /// Pending -> InFlight. False if the job was cancelled meanwhile.
    pub(crate) fn begin(&self, start: f64) -> bool {
        let mut s = self.status();
        match s.state {
            TicketState::Pending => {
                s.state = TicketState::InFlight;
                s.start = Some(start);
                true
            }
            TicketState::InFlight => true,
            _ => false,
        }
    }

    pub(crate) fn finish(&self, end: f64, outcome: Result<Option<Vec<u8>>, StorageError>) {
        let mut s = self.status();
        if s.state.is_terminal() {
            return;
        }
        if s.start.is_none() {
            s.start = Some(end);
        }
        s.end = Some(end);
        match outcome {
            Ok(data) => {
                s.state = TicketState::Done;
                s.data = data;
            }
            Err(e) => {
                s.state = TicketState::Failed;
                s.error = Some(e);
            }
        }
        drop(s);
        self.0.cv.notify_all();
    }

    pub(crate) fn try_cancel(&self) -> bool {
        let mut s = self.status();
        if s.state != TicketState::Pending {
            return false;
        }
        s.state = TicketState::Cancelled;
        drop(s);
        self.0.cv.notify_all();
        true
    }

    pub(crate) fn wait_blocking(&self) {
        let mut s = self.status();
        while !s.state.is_terminal() {
            s = self.0.cv.wait(s).unwrap_or_else(|e| e.into_inner());
        }
    }
}
