use std::time::Duration;

use parking_lot::{Condvar, Mutex};

use crate::fabric::ClientId;

pub const RECENT_CAPACITY: usize = 128;

/// One requested chunk: word 0 of the request and who asked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecentEntry {
    pub chunk: u64,
    pub client: ClientId,
}

struct Ring {
    slots: Vec<RecentEntry>,
    head: usize,
    pushes: u64,
    closed: bool,
}

/// Ring of the most recently requested chunk ids. Pushing wakes waiting
/// prefetchers.
pub struct RecentList {
    ring: Mutex<Ring>,
    cond: Condvar,
}

impl Default for RecentList {
    fn default() -> Self {
        Self::new()
    }
}

impl RecentList {
    pub fn new() -> Self {
        RecentList {
            ring: Mutex::new(Ring { slots: Vec::with_capacity(RECENT_CAPACITY), head: 0, pushes: 0, closed: false }),
            cond: Condvar::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        RECENT_CAPACITY
    }

    /// Append, overwriting the oldest entry when full. Returns the sequence
    /// number of the new entry (1 for the first push).
    pub fn push(&self, entry: RecentEntry) -> u64 {
        let mut r = self.ring.lock();
        if r.slots.len() < RECENT_CAPACITY {
            r.slots.push(entry);
        } else {
            let head = r.head;
            r.slots[head] = entry;
        }
        r.head = (r.head + 1) % RECENT_CAPACITY;
        r.pushes += 1;
        let seq = r.pushes;
        drop(r);
        self.cond.notify_all();
        seq
    }

    pub fn pushes(&self) -> u64 {
        self.ring.lock().pushes
    }

    pub fn len(&self) -> usize {
        self.ring.lock().slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Contents from oldest to newest.
    pub fn snapshot(&self) -> Vec<RecentEntry> {
        let r = self.ring.lock();
        ordered(&r).collect()
    }

    /// Entries pushed after sequence number `seen`, oldest first, with their
    /// sequence numbers. Blocks up to `timeout` when there are none. Entries
    /// already overwritten are skipped.
    pub fn wait_since(&self, seen: u64, timeout: Duration) -> Vec<(u64, RecentEntry)> {
        let mut r = self.ring.lock();
        if r.pushes <= seen && !r.closed {
            self.cond.wait_for(&mut r, timeout);
        }
        let newer = (r.pushes.saturating_sub(seen) as usize).min(r.slots.len());
        let first_seq = r.pushes - newer as u64 + 1;
        let all: Vec<RecentEntry> = ordered(&r).collect();
        all[all.len() - newer..].iter().enumerate().map(|(i, e)| (first_seq + i as u64, *e)).collect()
    }

    /// Wake every waiter; later waits return immediately.
    pub fn close(&self) {
        self.ring.lock().closed = true;
        self.cond.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.ring.lock().closed
    }
}

fn ordered(r: &Ring) -> impl Iterator<Item = RecentEntry> + '_ {
    let n = r.slots.len();
    let start = if n < RECENT_CAPACITY { 0 } else { r.head };
    (0..n).map(move |i| r.slots[(start + i) % n])
}
