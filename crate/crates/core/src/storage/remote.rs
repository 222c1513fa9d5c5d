use std::thread;
use std::time::Duration;

use bytes::Bytes;

use super::{ByteRange, Result, SharedProvider, StorageError, StorageKey, StorageProvider};

/// Per-request cost model of a remote object store.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LatencyModel {
    /// Fixed round-trip time charged to every request.
    pub per_request: Duration,
    /// Transfer rate; `None` means unlimited.
    pub bytes_per_second: Option<f64>,
}

impl LatencyModel {
    pub fn fixed(per_request: Duration) -> Self {
        LatencyModel {
            per_request,
            bytes_per_second: None,
        }
    }

    pub fn cost(&self, bytes: u64) -> Duration {
        let transfer = match self.bytes_per_second {
            Some(bps) if bps > 0.0 => Duration::from_secs_f64(bytes as f64 / bps),
            _ => Duration::ZERO,
        };
        self.per_request + transfer
    }
}

/// Range-request object store stand-in: forwards to a backend and sleeps
/// according to a [`LatencyModel`].
///
/// An HTTP object-store client would implement [`StorageProvider`] the same
/// way; the simulator makes remote behaviour reproducible on one machine.
#[derive(Debug, Clone)]
pub struct SimulatedRemote {
    backend: SharedProvider,
    latency: LatencyModel,
}

impl SimulatedRemote {
    pub fn new(backend: SharedProvider, latency: LatencyModel) -> Self {
        SimulatedRemote { backend, latency }
    }

    pub fn latency(&self) -> LatencyModel {
        self.latency
    }

    fn charge(&self, bytes: u64) {
        let d = self.latency.cost(bytes);
        if !d.is_zero() {
            thread::sleep(d);
        }
    }
}

impl StorageProvider for SimulatedRemote {
    fn get(&self, key: &StorageKey, range: Option<ByteRange>) -> Result<Bytes> {
        let data = self.backend.get(key, range);
        self.charge(data.as_ref().map(|d| d.len() as u64).unwrap_or(0));
        data
    }

    fn put(&self, key: &StorageKey, data: Bytes) -> Result<()> {
        self.charge(data.len() as u64);
        self.backend.put(key, data)
    }

    fn delete(&self, key: &StorageKey) -> Result<()> {
        self.charge(0);
        self.backend.delete(key)
    }

    fn list(&self, prefix: &str) -> Result<Vec<StorageKey>> {
        self.charge(0);
        self.backend.list(prefix)
    }

    fn size(&self, key: &StorageKey) -> Result<u64> {
        self.charge(0);
        self.backend.size(key)
    }
}

/// Rejects every mutation.
#[derive(Debug, Clone)]
pub struct ReadOnly(pub SharedProvider);

impl StorageProvider for ReadOnly {
    fn get(&self, key: &StorageKey, range: Option<ByteRange>) -> Result<Bytes> {
        self.0.get(key, range)
    }

    fn put(&self, key: &StorageKey, _data: Bytes) -> Result<()> {
        Err(StorageError::ReadOnlyProvider(key.to_string()))
    }

    fn delete(&self, key: &StorageKey) -> Result<()> {
        Err(StorageError::ReadOnlyProvider(key.to_string()))
    }

    fn list(&self, prefix: &str) -> Result<Vec<StorageKey>> {
        self.0.list(prefix)
    }

    fn size(&self, key: &StorageKey) -> Result<u64> {
        self.0.size(key)
    }
}
