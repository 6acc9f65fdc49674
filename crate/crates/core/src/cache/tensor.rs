//! Tensor handles and stable tensor identities.
//!
//! A handle is a shaped view over a shared byte buffer. Identity comes from a
//! tick stamped on the buffer the first time anyone asks for it, combined
//! with the view's shape. Views and transposes share the buffer and so share
//! the tick; a fresh allocation, even at a recycled address, gets a new one.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

static NEXT_TICK: AtomicU64 = AtomicU64::new(1);

fn fresh_tick() -> u64 {
    NEXT_TICK.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Device {
    Gpu,
    Host,
}

#[derive(Debug)]
pub struct Buffer {
    data: Vec<u8>,
    tick: OnceLock<u64>,
    device: Device,
}

impl AsRef<[u8]> for Buffer {
    fn as_ref(&self) -> &[u8] {
        &self.data
    }
}

impl Buffer {
    fn tick(&self) -> u64 {
        *self.tick.get_or_init(fresh_tick)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TensorId {
    pub tick: u64,
    pub shape: Vec<usize>,
}

impl fmt::Display for TensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}[", self.tick)?;
        for (i, d) in self.shape.iter().enumerate() {
            if i > 0 {
                f.write_str("x")?;
            }
            write!(f, "{d}")?;
        }
        f.write_str("]")
    }
}

#[derive(Debug, Clone)]
pub struct TensorHandle {
    buf: Arc<Buffer>,
    shape: Vec<usize>,
}

impl TensorHandle {
    /// Device tensor over `data`. The shape's element count must divide the
    /// byte length evenly.
    pub fn new(data: Vec<u8>, shape: Vec<usize>) -> Self {
        Self::on(Device::Gpu, data, shape)
    }

    pub fn on(device: Device, data: Vec<u8>, shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        assert!(
            (numel == 0 && data.is_empty()) || (numel > 0 && data.len().is_multiple_of(numel)),
            "{} bytes do not fit shape {shape:?}",
            data.len()
        );
        Self {
            buf: Arc::new(Buffer {
                data,
                tick: OnceLock::new(),
                device,
            }),
            shape,
        }
    }

    /// A copy of a tensor brought back from storage; keeps the identity of
    /// the original.
    pub(crate) fn restored(data: Vec<u8>, id: &TensorId) -> Self {
        let tick = OnceLock::new();
        let _ = tick.set(id.tick);
        Self {
            buf: Arc::new(Buffer {
                data,
                tick,
                device: Device::Gpu,
            }),
            shape: id.shape.clone(),
        }
    }

    /// Another view of the same buffer.
    pub fn view(&self, shape: Vec<usize>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.numel(),
            "view must keep the element count"
        );
        Self {
            buf: Arc::clone(&self.buf),
            shape,
        }
    }

    /// Reversed dimensions over the same buffer.
    pub fn transpose(&self) -> Self {
        let mut shape = self.shape.clone();
        shape.reverse();
        self.view(shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.buf.data
    }

    pub fn size_bytes(&self) -> u64 {
        self.buf.data.len() as u64
    }

    pub fn device(&self) -> Device {
        self.buf.device
    }

    pub fn same_storage(&self, other: &TensorHandle) -> bool {
        Arc::ptr_eq(&self.buf, &other.buf)
    }

    /// Address of the first byte, for reuse experiments.
    pub fn data_ptr(&self) -> *const u8 {
        self.buf.data.as_ptr()
    }

    pub fn checksum(&self) -> u32 {
        crc32fast::hash(&self.buf.data)
    }

    /// Recover the allocation if this is the last handle to it.
    pub fn into_bytes(self) -> Result<Vec<u8>, TensorHandle> {
        let shape = self.shape;
        Arc::try_unwrap(self.buf)
            .map(|b| b.data)
            .map_err(|buf| TensorHandle { buf, shape })
    }

    pub(crate) fn payload(&self) -> Arc<Buffer> {
        Arc::clone(&self.buf)
    }

    pub(crate) fn storage_tick(&self) -> u64 {
        self.buf.tick()
    }
}

/// Identity of the tensor behind `handle`, stamping its buffer on first use.
pub fn get_id(handle: &TensorHandle) -> TensorId {
    TensorId {
        tick: handle.storage_tick(),
        shape: handle.shape.clone(),
    }
}
