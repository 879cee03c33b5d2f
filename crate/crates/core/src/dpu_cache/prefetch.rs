use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use log::{trace, warn};

use super::recent::{RecentEntry, RecentList};
use super::table::{CacheTable, GroupId};
use crate::fabric::ClientId;

/// What the prefetcher needs from its owner: chunk-to-group mapping and a
/// way to read a whole group from the memory node.
pub trait GroupSource: Send + Sync {
    /// Group holding the chunk with packed id `chunk`, or `None` when that
    /// region is not dynamically cached.
    fn locate(&self, chunk: u64) -> Option<GroupId>;
    /// Groups in the region.
    fn group_count(&self, region_id: u16) -> u64;
    fn fetch_group(&self, group: GroupId, client: ClientId) -> Result<Vec<u8>, String>;
    /// Whether dynamic caching is currently on.
    fn active(&self) -> bool {
        true
    }
}

#[derive(Debug, Default)]
pub struct PrefetchCounters {
    pub triggers: AtomicU64,
    pub fills: AtomicU64,
    pub bytes: AtomicU64,
    pub failures: AtomicU64,
}

/// Fill the group of `entry` and the `degree` groups after it, skipping
/// those present or in flight. Returns the number of groups filled.
pub fn prefetch_for(
    table: &CacheTable,
    source: &dyn GroupSource,
    entry: RecentEntry,
    degree: u64,
    counters: &PrefetchCounters,
) -> usize {
    let Some(first) = source.locate(entry.chunk) else { return 0 };
    counters.triggers.fetch_add(1, Ordering::Relaxed);
    let count = source.group_count(first.region_id);
    let mut filled = 0;
    for g in first.group..=first.group.saturating_add(degree) {
        if g >= count {
            break;
        }
        let group = GroupId::new(first.region_id, g);
        let Some(ticket) = table.begin_fill(group) else { continue };
        match source.fetch_group(group, entry.client) {
            Ok(data) => {
                let n = data.len() as u64;
                if table.complete_fill(ticket, &data) {
                    filled += 1;
                    counters.fills.fetch_add(1, Ordering::Relaxed);
                    counters.bytes.fetch_add(n, Ordering::Relaxed);
                    trace!("prefetched {group:?}");
                }
            }
            Err(e) => {
                table.abort_fill(ticket);
                counters.failures.fetch_add(1, Ordering::Relaxed);
                warn!("prefetch of {group:?} failed: {e}");
            }
        }
    }
    filled
}

/// Background thread that follows the recent list and prefetches.
pub struct Prefetcher {
    stop: Arc<AtomicBool>,
    recent: Arc<RecentList>,
    counters: Arc<PrefetchCounters>,
    handle: Option<JoinHandle<()>>,
}

impl Prefetcher {
    pub fn spawn(recent: Arc<RecentList>, table: Arc<CacheTable>, source: Arc<dyn GroupSource>, degree: u64) -> Prefetcher {
        let stop = Arc::new(AtomicBool::new(false));
        let counters = Arc::new(PrefetchCounters::default());
        let handle = {
            let (stop, recent, counters) = (stop.clone(), recent.clone(), counters.clone());
            let mut seen = recent.pushes();
            std::thread::Builder::new()
                .name("prefetch".into())
                .spawn(move || {
                    while !stop.load(Ordering::Acquire) {
                        for (seq, entry) in recent.wait_since(seen, Duration::from_millis(20)) {
                            seen = seq;
                            if source.active() {
                                prefetch_for(&table, source.as_ref(), entry, degree, &counters);
                            }
                        }
                    }
                })
                .expect("spawn prefetcher")
        };
        Prefetcher { stop, recent, counters, handle: Some(handle) }
    }

    pub fn counters(&self) -> &PrefetchCounters {
        &self.counters
    }

    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::Release);
        self.recent.close();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        self.stop();
    }
}
