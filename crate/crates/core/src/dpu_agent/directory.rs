use std::collections::HashMap;

use parking_lot::RwLock;

use crate::fabric::{ClientId, EndpointId, RegisteredRegion};

/// Where a region lives and how the proxy reaches it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DirectoryEntry {
    pub memory: EndpointId,
    /// Descriptor used for reads.
    pub read: RegisteredRegion,
    /// The writer and its read-write descriptor.
    pub write: Option<(ClientId, RegisteredRegion)>,
    pub length: u64,
    pub chunk_size: u32,
    /// Dynamic caching applies to this region.
    pub dynamic: bool,
}

impl DirectoryEntry {
    pub fn writer(&self) -> Option<ClientId> {
        self.write.map(|(c, _)| c)
    }

    pub fn chunk_offset(&self, page_offset: u64) -> Option<u64> {
        page_offset.checked_mul(u64::from(self.chunk_size))
    }
}

/// Region id to location map. Read on every request, written only by the
/// control plane.
#[derive(Debug, Default)]
pub struct RegionDirectory {
    entries: RwLock<HashMap<u16, DirectoryEntry>>,
}

impl RegionDirectory {
    pub fn new() -> RegionDirectory {
        RegionDirectory::default()
    }

    pub fn get(&self, region_id: u16) -> Option<DirectoryEntry> {
        self.entries.read().get(&region_id).copied()
    }

    pub fn insert(&self, region_id: u16, entry: DirectoryEntry) {
        self.entries.write().insert(region_id, entry);
    }

    /// Apply `f` to an existing entry; returns whether it existed.
    pub fn update(&self, region_id: u16, f: impl FnOnce(&mut DirectoryEntry)) -> bool {
        match self.entries.write().get_mut(&region_id) {
            Some(e) => {
                f(e);
                true
            }
            None => false,
        }
    }

    pub fn remove(&self, region_id: u16) -> Option<DirectoryEntry> {
        self.entries.write().remove(&region_id)
    }

    pub fn region_ids(&self) -> Vec<u16> {
        let mut ids: Vec<u16> = self.entries.read().keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
