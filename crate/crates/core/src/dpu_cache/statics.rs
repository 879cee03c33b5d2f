use parking_lot::RwLock;

use super::budget::Reservation;
use crate::fabric::RegisteredRegion;

/// A pinned, never-updated copy of chunks `first..first+count` of a region.
#[derive(Debug)]
pub struct StaticEntry {
    pub region_id: u16,
    pub first_chunk: u64,
    pub chunk_count: u64,
    /// Proxy-owned copy, exported read-only to hosts.
    pub region: RegisteredRegion,
    pub reservation: Reservation,
}

impl StaticEntry {
    pub fn covers(&self, region_id: u16, chunk: u64) -> bool {
        region_id == self.region_id && chunk >= self.first_chunk && chunk < self.first_chunk + self.chunk_count
    }
}

/// Static ranges held by the proxy.
#[derive(Debug, Default)]
pub struct StaticCache {
    entries: RwLock<Vec<StaticEntry>>,
}

impl StaticCache {
    pub fn new() -> StaticCache {
        StaticCache::default()
    }

    pub fn insert(&self, entry: StaticEntry) {
        self.entries.write().push(entry);
    }

    pub fn covers(&self, region_id: u16, chunk: u64) -> bool {
        self.entries.read().iter().any(|e| e.covers(region_id, chunk))
    }

    pub fn has_region(&self, region_id: u16) -> bool {
        self.entries.read().iter().any(|e| e.region_id == region_id)
    }

    /// Take out every entry of `region_id`; the caller deregisters them.
    pub fn remove_region(&self, region_id: u16) -> Vec<StaticEntry> {
        let mut entries = self.entries.write();
        let (gone, keep) = entries.drain(..).partition(|e| e.region_id == region_id);
        *entries = keep;
        gone
    }

    pub fn drain(&self) -> Vec<StaticEntry> {
        self.entries.write().drain(..).collect()
    }

    pub fn bytes(&self) -> u64 {
        self.entries.read().iter().map(|e| e.region.length).sum()
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
