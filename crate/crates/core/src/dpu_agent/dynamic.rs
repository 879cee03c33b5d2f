use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{Inner, ProxyConfig, ReadTask};
use crate::dpu_cache::{
    AdaptiveController, CacheError, CacheTable, GroupId, GroupSource, HitRateMonitor, Lookup, PrefetchCounters, RecentEntry,
    RecentList, Reservation, TableStats,
};
use crate::fabric::{Charge, ClientId};
use crate::protocol::{ChunkAddr, ReadResponse};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CacheStats {
    pub lookups: u64,
    pub hits: u64,
    /// Misses taken while caching was off that the prefetcher would have
    /// covered.
    pub shadow_hits: u64,
    pub window_hit_rate: Option<f64>,
    pub threshold: f64,
    pub enabled: bool,
    pub transitions: u64,
    /// Lookup count at the first switch-off.
    pub disabled_at: Option<u64>,
    pub table: TableStats,
    pub prefetch_fills: u64,
    pub prefetch_bytes: u64,
}

struct Adaptive {
    monitor: HitRateMonitor,
    controller: AdaptiveController,
    lookups: u64,
    hits: u64,
    shadow_hits: u64,
    disabled_at: Option<u64>,
}

pub(super) enum Probe {
    Hit(Vec<u8>),
    Pending,
    Miss,
    /// Spans two groups; never cached.
    Bypass,
}

pub(super) struct DynamicCache {
    pub table: Arc<CacheTable>,
    pub recent: Arc<RecentList>,
    entry_bytes: u64,
    degree: u64,
    adaptive: bool,
    state: Mutex<Adaptive>,
    enabled: AtomicBool,
    _reservation: Reservation,
}

impl DynamicCache {
    pub fn new(config: &ProxyConfig, threshold: f64, reservation: Reservation) -> Result<DynamicCache, CacheError> {
        let seed = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed).gen();
        Ok(DynamicCache {
            table: Arc::new(CacheTable::new(config.cache_bytes, config.entry_bytes, seed)?),
            recent: Arc::new(RecentList::new()),
            entry_bytes: config.entry_bytes as u64,
            degree: config.prefetch_degree,
            adaptive: config.adaptive,
            state: Mutex::new(Adaptive {
                monitor: HitRateMonitor::new(config.hit_window),
                controller: AdaptiveController::new(threshold, config.hysteresis),
                lookups: 0,
                hits: 0,
                shadow_hits: 0,
                disabled_at: None,
            }),
            enabled: AtomicBool::new(true),
            _reservation: reservation,
        })
    }

    pub fn enabled(&self) -> bool {
        self.enabled.load(Ordering::Acquire)
    }

    fn group(&self, task: &ReadTask, region_id: u16) -> Option<GroupId> {
        let g = task.offset / self.entry_bytes;
        let last = (task.offset + u64::from(task.size) - 1) / self.entry_bytes;
        (g == last).then_some(GroupId::new(region_id, g))
    }

    fn serve(&self, task: &ReadTask, pin: &crate::dpu_cache::Pin<'_>) -> Vec<u8> {
        let at = (task.offset - pin.group.group * self.entry_bytes) as usize;
        let mut buf = ReadResponse::staging_buffer(task.dest_addr, task.size as usize);
        buf.extend_from_slice(&pin.data()[at..at + task.size as usize]);
        buf
    }

    /// Look a read up in the table, then note it in the recent list so a
    /// fill it triggers is not mistaken for a hit.
    pub fn probe(&self, task: &ReadTask, region_id: u16, chunk_size: u32) -> Probe {
        let Some(group) = self.group(task, region_id) else { return Probe::Bypass };
        let before = (!self.enabled()).then(|| self.recent.snapshot());
        let found = self.table.try_lookup(group);
        self.recent.push(RecentEntry { chunk: task.chunk_word, client: task.client });
        match found {
            Lookup::Hit(pin) => {
                let buf = self.serve(task, &pin);
                drop(pin);
                self.record(true, false);
                Probe::Hit(buf)
            }
            Lookup::Pending => Probe::Pending,
            Lookup::Miss => {
                let shadow = before.is_some_and(|r| self.would_prefetch(&r, group, chunk_size));
                self.record(shadow, shadow);
                Probe::Miss
            }
        }
    }

    /// Wait for an in-flight fill of the task's group and serve from it.
    pub fn wait_fill(&self, task: &ReadTask, region_id: u16) -> Option<Vec<u8>> {
        let group = self.group(task, region_id)?;
        match self.table.lookup(group) {
            Lookup::Hit(pin) => {
                let buf = self.serve(task, &pin);
                drop(pin);
                self.record(true, false);
                Some(buf)
            }
            _ => {
                self.record(false, false);
                None
            }
        }
    }

    fn would_prefetch(&self, recent: &[RecentEntry], group: GroupId, chunk_size: u32) -> bool {
        recent.iter().any(|e| {
            let a = ChunkAddr::unpack(e.chunk);
            let g = a.page_offset * u64::from(chunk_size) / self.entry_bytes;
            a.region_id == group.region_id && g <= group.group && group.group <= g.saturating_add(self.degree)
        })
    }

    fn record(&self, hit: bool, shadow: bool) {
        let mut st = self.state.lock();
        st.lookups += 1;
        if hit && !shadow {
            st.hits += 1;
        }
        if shadow {
            st.shadow_hits += 1;
        }
        st.monitor.record(hit);
        if !self.adaptive {
            return;
        }
        let before = st.controller.enabled();
        let st = &mut *st;
        let now = st.controller.update(&st.monitor);
        if now != before {
            self.enabled.store(now, Ordering::Release);
            st.monitor.clear();
            if !now && st.disabled_at.is_none() {
                st.disabled_at = Some(st.lookups);
            }
            log::info!("dynamic caching {} after {} lookups", if now { "re-enabled" } else { "disabled" }, st.lookups);
        }
    }

    pub fn invalidate_range(&self, region_id: u16, offset: u64, len: u64) {
        if len == 0 {
            return;
        }
        for g in offset / self.entry_bytes..=(offset + len - 1) / self.entry_bytes {
            self.table.invalidate(GroupId::new(region_id, g));
        }
    }

    pub fn stats(&self, prefetch: Option<&PrefetchCounters>) -> CacheStats {
        let st = self.state.lock();
        let (fills, bytes) = prefetch
            .map(|p| (p.fills.load(Ordering::Relaxed), p.bytes.load(Ordering::Relaxed)))
            .unwrap_or_default();
        CacheStats {
            lookups: st.lookups,
            hits: st.hits,
            shadow_hits: st.shadow_hits,
            window_hit_rate: st.monitor.hit_rate(),
            threshold: st.controller.threshold,
            enabled: st.controller.enabled(),
            transitions: st.controller.transitions(),
            disabled_at: st.disabled_at,
            table: self.table.stats(),
            prefetch_fills: fills,
            prefetch_bytes: bytes,
        }
    }
}

/// Prefetch source backed by the proxy's directory and memory-side endpoint.
pub(super) struct Source(pub Arc<Inner>);

impl GroupSource for Source {
    fn locate(&self, chunk: u64) -> Option<GroupId> {
        let cache = self.0.cache.as_ref()?;
        let a = ChunkAddr::unpack(chunk);
        let e = self.0.directory.get(a.region_id).filter(|e| e.dynamic)?;
        let offset = e.chunk_offset(a.page_offset)?;
        (offset < e.length).then(|| GroupId::new(a.region_id, offset / cache.entry_bytes))
    }

    fn group_count(&self, region_id: u16) -> u64 {
        match (self.0.cache.as_ref(), self.0.directory.get(region_id)) {
            (Some(c), Some(e)) => e.length.div_ceil(c.entry_bytes),
            _ => 0,
        }
    }

    fn fetch_group(&self, group: GroupId, client: ClientId) -> Result<Vec<u8>, String> {
        let cache = self.0.cache.as_ref().ok_or("no cache")?;
        let e = self.0.directory.get(group.region_id).ok_or("region gone")?;
        let start = group.group * cache.entry_bytes;
        let len = cache.entry_bytes.min(e.length.saturating_sub(start));
        self.0
            .fabric
            .one_sided_read(self.0.net_ep, &e.read, start, len as usize, Charge::background(client))
            .map_err(|e| e.to_string())
    }

    fn active(&self) -> bool {
        self.0.cache.as_ref().is_some_and(|c| c.enabled())
    }
}
