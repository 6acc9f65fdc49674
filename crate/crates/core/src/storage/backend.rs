use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::{StorageError, StorageKey};

/// Environment variable naming the directory for offloaded tensors.
pub const STORAGE_ROOT_ENV: &str = "ACTOFFLOAD_STORAGE_ROOT";

/// Flat key-value store. Implementations must make a value visible only
/// after it is completely written.
pub trait Backend: Send + Sync {
    fn put(&self, key: &StorageKey, data: &[u8]) -> Result<(), StorageError>;
    fn get(&self, key: &StorageKey) -> Result<Vec<u8>, StorageError>;
    fn remove(&self, key: &StorageKey) -> Result<(), StorageError>;
    fn contains(&self, key: &StorageKey) -> bool {
        self.size_of(key).is_some()
    }
    /// Stored length of `key`, if present.
    fn size_of(&self, key: &StorageKey) -> Option<u64>;
    fn used_bytes(&self) -> u64;
    fn quota(&self) -> Option<u64>;
    fn root(&self) -> Option<&Path> {
        None
    }
}

fn check_quota(quota: Option<u64>, used: u64, requested: u64) -> Result<(), StorageError> {
    if let Some(q) = quota {
        if used + requested > q {
            return Err(StorageError::BackendFull {
                requested,
                available: q.saturating_sub(used),
            });
        }
    }
    Ok(())
}

/// RAM-resident backend, used for the host-memory target and for
/// simulation.
#[derive(Debug, Default)]
pub struct MemoryBackend {
    map: Mutex<HashMap<StorageKey, Vec<u8>>>,
    quota: Option<u64>,
}

impl MemoryBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_quota(quota: u64) -> Self {
        Self {
            map: Mutex::default(),
            quota: Some(quota),
        }
    }

    fn map(&self) -> std::sync::MutexGuard<'_, HashMap<StorageKey, Vec<u8>>> {
        self.map.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn len(&self) -> usize {
        self.map().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Backend for MemoryBackend {
    fn put(&self, key: &StorageKey, data: &[u8]) -> Result<(), StorageError> {
        let mut map = self.map();
        if map.contains_key(key) {
            return Err(StorageError::DuplicateId(*key));
        }
        let used = map.values().map(|v| v.len() as u64).sum();
        check_quota(self.quota, used, data.len() as u64)?;
        map.insert(*key, data.to_vec());
        Ok(())
    }

    fn get(&self, key: &StorageKey) -> Result<Vec<u8>, StorageError> {
        self.map()
            .get(key)
            .cloned()
            .ok_or(StorageError::NotFound(*key))
    }

    fn remove(&self, key: &StorageKey) -> Result<(), StorageError> {
        self.map()
            .remove(key)
            .map(|_| ())
            .ok_or(StorageError::NotFound(*key))
    }

    fn size_of(&self, key: &StorageKey) -> Option<u64> {
        self.map().get(key).map(|v| v.len() as u64)
    }

    fn used_bytes(&self) -> u64 {
        self.map().values().map(|v| v.len() as u64).sum()
    }

    fn quota(&self) -> Option<u64> {
        self.quota
    }
}

/// One file per tensor under a root directory.
///
/// Each file is written once, front to back, into a temporary name, synced,
/// and renamed into place, so readers never observe a partial tensor. On
/// Linux the written pages are dropped from the page cache afterwards so
/// later reads hit the drive rather than RAM.
#[derive(Debug)]
pub struct FileBackend {
    root: PathBuf,
    quota: Option<u64>,
    sizes: Mutex<HashMap<StorageKey, u64>>,
}

impl FileBackend {
    pub fn new(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            quota: None,
            sizes: Mutex::default(),
        })
    }

    /// Root taken from `ACTOFFLOAD_STORAGE_ROOT`, else a directory under
    /// the system temp dir.
    pub fn from_env() -> io::Result<Self> {
        let root = std::env::var_os(STORAGE_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| std::env::temp_dir().join("actoffload"));
        Self::new(root)
    }

    pub fn with_quota(mut self, quota: u64) -> Self {
        self.quota = Some(quota);
        self
    }

    pub fn path_of(&self, key: &StorageKey) -> PathBuf {
        self.root.join(key.file_name())
    }

    fn sizes(&self) -> std::sync::MutexGuard<'_, HashMap<StorageKey, u64>> {
        self.sizes.lock().unwrap_or_else(|e| e.into_inner())
    }
}

#[cfg(target_os = "linux")]
fn drop_cached_pages(file: &File) {
    use std::os::unix::io::AsRawFd;
    // Advisory only; failure leaves the pages cached.
    unsafe {
        libc::posix_fadvise(file.as_raw_fd(), 0, 0, libc::POSIX_FADV_DONTNEED);
    }
}

#[cfg(not(target_os = "linux"))]
fn drop_cached_pages(_file: &File) {}

impl Backend for FileBackend {
    fn put(&self, key: &StorageKey, data: &[u8]) -> Result<(), StorageError> {
        {
            let sizes = self.sizes();
            if sizes.contains_key(key) {
                return Err(StorageError::DuplicateId(*key));
            }
            check_quota(self.quota, sizes.values().sum(), data.len() as u64)?;
        }
        let path = self.path_of(key);
        let tmp = path.with_extension("part");
        let mut f = File::create(&tmp)?;
        f.write_all(data)?;
        f.sync_data()?;
        drop_cached_pages(&f);
        drop(f);
        fs::rename(&tmp, &path)?;
        self.sizes().insert(*key, data.len() as u64);
        Ok(())
    }

    fn get(&self, key: &StorageKey) -> Result<Vec<u8>, StorageError> {
        let mut f = match File::open(self.path_of(key)) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(StorageError::NotFound(*key))
            }
            Err(e) => return Err(e.into()),
        };
        let mut buf = Vec::new();
        f.read_to_end(&mut buf)?;
        drop_cached_pages(&f);
        Ok(buf)
    }

    fn remove(&self, key: &StorageKey) -> Result<(), StorageError> {
        match fs::remove_file(self.path_of(key)) {
            Ok(()) => {
                self.sizes().remove(key);
                Ok(())
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(StorageError::NotFound(*key)),
            Err(e) => Err(e.into()),
        }
    }

    fn size_of(&self, key: &StorageKey) -> Option<u64> {
        self.sizes().get(key).copied()
    }

    fn used_bytes(&self) -> u64 {
        self.sizes().values().sum()
    }

    fn quota(&self) -> Option<u64> {
        self.quota
    }

    fn root(&self) -> Option<&Path> {
        Some(&self.root)
    }
}
