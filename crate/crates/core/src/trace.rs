//! Timestamped event log of one simulated step, and device-memory replay.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    ComputeStart,
    ComputeEnd,
    StoreStart,
    StoreEnd,
    LoadStart,
    LoadEnd,
    /// Tracked device bytes become resident.
    Alloc,
    /// Tracked device bytes are reclaimed.
    Free,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::ComputeStart => "ComputeStart",
            EventKind::ComputeEnd => "ComputeEnd",
            EventKind::StoreStart => "StoreStart",
            EventKind::StoreEnd => "StoreEnd",
            EventKind::LoadStart => "LoadStart",
            EventKind::LoadEnd => "LoadEnd",
            EventKind::Alloc => "Alloc",
            EventKind::Free => "Free",
        }
    }

    /// `(pair class, opens)` for events that come in pairs.
    fn pairing(self) -> (u8, bool) {
        match self {
            EventKind::ComputeStart => (0, true),
            EventKind::ComputeEnd => (0, false),
            EventKind::StoreStart => (1, true),
            EventKind::StoreEnd => (1, false),
            EventKind::LoadStart => (2, true),
            EventKind::LoadEnd => (2, false),
            EventKind::Alloc => (3, true),
            EventKind::Free => (3, false),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub time: f64,
    pub kind: EventKind,
    pub subject: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventTrace {
    pub events: Vec<TraceEvent>,
}

impl EventTrace {
    pub fn new(mut events: Vec<TraceEvent>) -> Self {
        events.sort_by(|a, b| a.time.total_cmp(&b.time));
        Self { events }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn of_kind(&self, kind: EventKind) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    /// Checks ordering and Start/End pairing per subject.
    pub fn check(&self) -> Result<(), TraceError> {
        let mut open: HashMap<(&str, u8), i64> = HashMap::new();
        let mut last = f64::NEG_INFINITY;
        for (i, e) in self.events.iter().enumerate() {
            if !e.time.is_finite() || e.time < last {
                return Err(TraceError::MalformedTrace(format!(
                    "event {i} at {} goes back in time",
                    e.time
                )));
            }
            last = e.time;
            let (class, opens) = e.kind.pairing();
            let n = open.entry((e.subject.as_str(), class)).or_default();
            *n += if opens { 1 } else { -1 };
            if *n < 0 {
                return Err(TraceError::MalformedTrace(format!(
                    "{} for {} without a matching start",
                    e.kind.as_str(),
                    e.subject
                )));
            }
        }
        if let Some(((s, _), _)) = open.iter().find(|(k, n)| **n != 0 && k.1 != 3) {
            return Err(TraceError::MalformedTrace(format!("{s} never finishes")));
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time_s", "event", "subject", "bytes"])?;
        for e in &self.events {
            w.write_record([
                e.time.to_string(),
                e.kind.as_str().to_string(),
                e.subject.clone(),
                e.bytes.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> csv::Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Highest resident tracked bytes over the trace, replaying Alloc and Free
/// in order.
pub fn peak_memory(trace: &EventTrace) -> Result<u64, TraceError> {
    trace.check()?;
    let mut resident: HashMap<&str, u64> = HashMap::new();
    let mut total: u64 = 0;
    let mut peak = 0;
    for e in &trace.events {
        match e.kind {
            EventKind::Alloc => {
                *resident.entry(&e.subject).or_default() += e.bytes;
                total += e.bytes;
                peak = peak.max(total);
            }
            EventKind::Free => {
                let held = resident.entry(&e.subject).or_default();
                if *held < e.bytes {
                    return Err(TraceError::MalformedTrace(format!(
                        "{} frees {} bytes but holds {}",
                        e.subject, e.bytes, held
                    )));
                }
                *held -= e.bytes;
                total -= e.bytes;
            }
            _ => {}
        }
    }
    Ok(peak)
}
