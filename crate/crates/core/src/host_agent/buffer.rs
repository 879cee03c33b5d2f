//! Unified chunk buffer with exact LRU replacement and dirty tracking.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use crossbeam::channel::{self, Sender};
use log::warn;
use parking_lot::{Condvar, Mutex, MutexGuard};
use serde::{Deserialize, Serialize};

use super::HostError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct ChunkKey {
    pub region_id: u16,
    pub chunk: u64,
}

impl ChunkKey {
    pub fn new(region_id: u16, chunk: u64) -> Self {
        ChunkKey { region_id, chunk }
    }
}

/// Where chunks come from and where dirty chunks go.
pub trait ChunkBackend: Send + Sync + 'static {
    fn fetch(&self, key: ChunkKey, len: usize) -> Result<Vec<u8>, HostError>;

    /// Returns once the buffer may forget `data`.
    fn write_back(&self, key: ChunkKey, data: Vec<u8>) -> Result<(), HostError>;

    /// Wait until every write-back handed over so far is durable.
    fn sync(&self) -> Result<(), HostError> {
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BufferConfig {
    pub capacity_chunks: usize,
    pub chunk_size: usize,
    /// Occupancy fraction that starts proactive eviction. 1.0 disables it.
    pub load_threshold: f64,
    /// Proactive eviction stops at this occupancy fraction.
    pub low_water: f64,
    pub trace: bool,
}

impl Default for BufferConfig {
    fn default() -> Self {
        BufferConfig { capacity_chunks: 1024, chunk_size: 64 << 10, load_threshold: 0.9, low_water: 0.8, trace: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BufferEvent {
    Insert(ChunkKey),
    /// Occupancy at the moment proactive eviction started.
    ProactiveStart { occupancy: usize },
    Evict { key: ChunkKey, dirty: bool, proactive: bool },
    WriteBackDone(ChunkKey),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferStats {
    pub hits: u64,
    pub misses: u64,
    pub fetches: u64,
    pub write_backs: u64,
    pub evictions: u64,
    pub proactive_evictions: u64,
}

struct Entry {
    data: Vec<u8>,
    dirty: bool,
    tick: u64,
    loading: bool,
    /// Write-backs of this entry not yet finished.
    flushing: u32,
    /// Evicted and waiting for its write-back; dropped when that finishes
    /// unless touched again first.
    evicted: bool,
}

struct Inner {
    entries: HashMap<ChunkKey, Entry>,
    lru: BTreeMap<u64, ChunkKey>,
    tick: u64,
    evicting: usize,
    background_jobs: usize,
    background_error: Option<HostError>,
    events: Vec<BufferEvent>,
}

struct Core {
    config: BufferConfig,
    backend: Arc<dyn ChunkBackend>,
    inner: Mutex<Inner>,
    cond: Condvar,
    high: usize,
    low: usize,
    hits: AtomicU64,
    misses: AtomicU64,
    fetches: AtomicU64,
    write_backs: AtomicU64,
    evictions: AtomicU64,
    proactive: AtomicU64,
}

pub struct PageBuffer {
    core: Arc<Core>,
    jobs: Option<Sender<(ChunkKey, Vec<u8>)>>,
    worker: Option<JoinHandle<()>>,
}

/// Full-chunk writes skip the fetch.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Fill {
    Fetch,
    Zero,
}

impl PageBuffer {
    pub fn new(config: BufferConfig, backend: Arc<dyn ChunkBackend>) -> Result<PageBuffer, HostError> {
        if config.capacity_chunks == 0 || config.chunk_size == 0 {
            return Err(HostError::Config("buffer capacity and chunk size must be positive".into()));
        }
        if !(config.load_threshold > 0.0 && config.load_threshold <= 1.0) {
            return Err(HostError::Config(format!("load_threshold {} outside (0, 1]", config.load_threshold)));
        }
        if config.load_threshold < 1.0 && !(config.low_water >= 0.0 && config.low_water < config.load_threshold) {
            return Err(HostError::Config(format!("low_water {} must lie below load_threshold", config.low_water)));
        }
        let cap = config.capacity_chunks as f64;
        let high = ((config.load_threshold * cap) - 1e-9).ceil().max(1.0) as usize;
        let low = ((config.low_water * cap) + 1e-9).floor() as usize;
        let core = Arc::new(Core {
            config,
            backend,
            inner: Mutex::new(Inner {
                entries: HashMap::new(),
                lru: BTreeMap::new(),
                tick: 0,
                evicting: 0,
                background_jobs: 0,
                background_error: None,
                events: Vec::new(),
            }),
            cond: Condvar::new(),
            high,
            low: low.min(high.saturating_sub(1)),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            fetches: AtomicU64::new(0),
            write_backs: AtomicU64::new(0),
            evictions: AtomicU64::new(0),
            proactive: AtomicU64::new(0),
        });
        let (tx, rx) = channel::unbounded::<(ChunkKey, Vec<u8>)>();
        let worker = {
            let core = core.clone();
            std::thread::Builder::new()
                .name("buffer-writeback".into())
                .spawn(move || {
                    for (key, data) in rx {
                        let res = core.backend.write_back(key, data);
                        core.finish_flush(key, res, true);
                    }
                })
                .map_err(|e| HostError::Config(e.to_string()))?
        };
        Ok(PageBuffer { core, jobs: Some(tx), worker: Some(worker) })
    }

    pub fn config(&self) -> &BufferConfig {
        &self.core.config
    }

    /// Copy `out.len()` bytes at `offset` of a region of `region_len` bytes.
    pub fn read(&self, region_id: u16, region_len: u64, offset: u64, out: &mut [u8]) -> Result<(), HostError> {
        let cs = self.core.config.chunk_size as u64;
        let mut done = 0usize;
        while done < out.len() {
            let pos = offset + done as u64;
            let chunk = pos / cs;
            let within = (pos % cs) as usize;
            let len = chunk_len(region_len, cs, chunk);
            let n = (len - within).min(out.len() - done);
            let dst = &mut out[done..done + n];
            self.access(ChunkKey::new(region_id, chunk), len, Fill::Fetch, |e| {
                dst.copy_from_slice(&e.data[within..within + n]);
            })?;
            done += n;
        }
        Ok(())
    }

    pub fn write(&self, region_id: u16, region_len: u64, offset: u64, data: &[u8]) -> Result<(), HostError> {
        let cs = self.core.config.chunk_size as u64;
        let mut done = 0usize;
        while done < data.len() {
            let pos = offset + done as u64;
            let chunk = pos / cs;
            let within = (pos % cs) as usize;
            let len = chunk_len(region_len, cs, chunk);
            let n = (len - within).min(data.len() - done);
            let fill = if within == 0 && n == len { Fill::Zero } else { Fill::Fetch };
            let src = &data[done..done + n];
            self.access(ChunkKey::new(region_id, chunk), len, fill, |e| {
                e.data[within..within + n].copy_from_slice(src);
                e.dirty = true;
            })?;
            done += n;
        }
        Ok(())
    }

    fn access(&self, key: ChunkKey, len: usize, fill: Fill, f: impl FnOnce(&mut Entry)) -> Result<(), HostError> {
        let core = &*self.core;
        let mut g = core.inner.lock();
        loop {
            if let Some(e) = g.entries.get(&key) {
                if e.loading {
                    core.cond.wait(&mut g);
                    continue;
                }
                core.hits.fetch_add(1, Ordering::Relaxed);
                core.touch(&mut g, key);
                f(g.entries.get_mut(&key).expect("entry present"));
                return Ok(());
            }
            if g.entries.len() >= core.config.capacity_chunks {
                core.evict_one(&mut g)?;
                continue;
            }
            break;
        }

        core.misses.fetch_add(1, Ordering::Relaxed);
        let tick = g.next_tick();
        g.entries.insert(key, Entry { data: Vec::new(), dirty: false, tick, loading: true, flushing: 0, evicted: false });
        if core.config.trace {
            g.events.push(BufferEvent::Insert(key));
        }
        let jobs = core.proactive_victims(&mut g);
        if !jobs.is_empty() {
            let tx = self.jobs.as_ref().expect("buffer running");
            for job in jobs {
                g.background_jobs += 1;
                tx.send(job).expect("write-back worker alive");
            }
        }

        let data = match fill {
            Fill::Zero => vec![0u8; len],
            Fill::Fetch => {
                drop(g);
                core.fetches.fetch_add(1, Ordering::Relaxed);
                let fetched = core.backend.fetch(key, len);
                g = core.inner.lock();
                match fetched {
                    Ok(d) if d.len() == len => d,
                    Ok(d) => {
                        g.entries.remove(&key);
                        core.cond.notify_all();
                        return Err(HostError::Protocol(format!("chunk {key:?}: got {} bytes, wanted {len}", d.len())));
                    }
                    Err(e) => {
                        g.entries.remove(&key);
                        core.cond.notify_all();
                        return Err(e);
                    }
                }
            }
        };
        let tick = g.next_tick();
        let e = g.entries.get_mut(&key).expect("loading entry stays");
        e.data = data;
        e.loading = false;
        e.tick = tick;
        g.lru.insert(tick, key);
        f(g.entries.get_mut(&key).expect("entry present"));
        core.cond.notify_all();
        Ok(())
    }

    /// Evict up to `n` least recently used entries now, writing dirty ones
    /// back before returning. Returns the evicted keys with their dirty bits.
    pub fn evict(&self, n: usize) -> Result<Vec<(ChunkKey, bool)>, HostError> {
        let core = &*self.core;
        let mut out = Vec::new();
        let mut g = core.inner.lock();
        for _ in 0..n {
            let Some(key) = core.oldest_evictable(&g) else { break };
            let dirty = g.entries[&key].dirty;
            core.evict_key(&mut g, key, false)?;
            out.push((key, dirty));
        }
        Ok(out)
    }

    /// Write back every dirty chunk and wait until all write-backs are durable.
    pub fn flush(&self) -> Result<(), HostError> {
        let core = &*self.core;
        let mut g = core.inner.lock();
        while g.entries.values().any(|e| e.dirty && e.flushing > 0) {
            core.cond.wait(&mut g);
        }
        let dirty: Vec<(ChunkKey, Vec<u8>)> = g
            .entries
            .iter_mut()
            .filter(|(_, e)| e.dirty && !e.loading)
            .map(|(k, e)| {
                e.dirty = false;
                e.flushing += 1;
                (*k, e.data.clone())
            })
            .collect();
        drop(g);
        let mut first_err = None;
        for (key, data) in dirty {
            let res = core.backend.write_back(key, data);
            if let Err(e) = &res {
                first_err.get_or_insert(e.clone());
            }
            core.finish_flush(key, res, false);
        }
        g = core.inner.lock();
        while g.background_jobs > 0 {
            core.cond.wait(&mut g);
        }
        if let Some(e) = g.background_error.take() {
            first_err.get_or_insert(e);
        }
        drop(g);
        core.backend.sync()?;
        first_err.map_or(Ok(()), Err)
    }

    /// Forget every chunk of a region. Dirty data is discarded.
    pub fn discard_region(&self, region_id: u16) {
        let core = &*self.core;
        let mut g = core.inner.lock();
        loop {
            let busy = g.entries.iter().any(|(k, e)| k.region_id == region_id && (e.loading || e.flushing > 0));
            if !busy {
                break;
            }
            core.cond.wait(&mut g);
        }
        let keys: Vec<ChunkKey> = g.entries.keys().filter(|k| k.region_id == region_id).copied().collect();
        for k in keys {
            let e = g.entries.remove(&k).expect("listed");
            g.lru.remove(&e.tick);
        }
        core.cond.notify_all();
    }

    pub fn resident(&self) -> usize {
        self.core.inner.lock().entries.len()
    }

    pub fn is_resident(&self, key: ChunkKey) -> bool {
        self.core.inner.lock().entries.get(&key).is_some_and(|e| !e.loading && !e.evicted)
    }

    pub fn is_dirty(&self, key: ChunkKey) -> bool {
        self.core.inner.lock().entries.get(&key).is_some_and(|e| e.dirty)
    }

    /// Resident keys from least to most recently used.
    pub fn lru_order(&self) -> Vec<ChunkKey> {
        self.core.inner.lock().lru.values().copied().collect()
    }

    pub fn events(&self) -> Vec<BufferEvent> {
        self.core.inner.lock().events.clone()
    }

    pub fn clear_events(&self) {
        self.core.inner.lock().events.clear();
    }

    /// Block until background write-backs queued so far have finished.
    pub fn quiesce(&self) {
        let mut g = self.core.inner.lock();
        while g.background_jobs > 0 {
            self.core.cond.wait(&mut g);
        }
    }

    pub fn stats(&self) -> BufferStats {
        let c = &self.core;
        BufferStats {
            hits: c.hits.load(Ordering::Relaxed),
            misses: c.misses.load(Ordering::Relaxed),
            fetches: c.fetches.load(Ordering::Relaxed),
            write_backs: c.write_backs.load(Ordering::Relaxed),
            evictions: c.evictions.load(Ordering::Relaxed),
            proactive_evictions: c.proactive.load(Ordering::Relaxed),
        }
    }
}

impl Drop for PageBuffer {
    fn drop(&mut self) {
        self.jobs.take();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

fn chunk_len(region_len: u64, chunk_size: u64, chunk: u64) -> usize {
    (region_len - chunk * chunk_size).min(chunk_size) as usize
}

impl Inner {
    fn next_tick(&mut self) -> u64 {
        self.tick += 1;
        self.tick
    }
}

impl Core {
    fn touch(&self, g: &mut MutexGuard<'_, Inner>, key: ChunkKey) {
        let tick = g.next_tick();
        let inner = &mut **g;
        let e = inner.entries.get_mut(&key).expect("touch of present entry");
        if e.evicted {
            e.evicted = false;
            inner.evicting -= 1;
        } else {
            inner.lru.remove(&e.tick);
        }
        e.tick = tick;
        inner.lru.insert(tick, key);
    }

    fn oldest_evictable(&self, g: &Inner) -> Option<ChunkKey> {
        g.lru.values().find(|k| g.entries[*k].flushing == 0).copied()
    }

    /// Make room for one more entry, waiting if nothing can be evicted.
    fn evict_one(&self, g: &mut MutexGuard<'_, Inner>) -> Result<(), HostError> {
        match self.oldest_evictable(g) {
            Some(key) => self.evict_key(g, key, false),
            None => {
                self.cond.wait(g);
                Ok(())
            }
        }
    }

    /// Evict `key` synchronously. The lock is released around a write-back.
    fn evict_key(&self, g: &mut MutexGuard<'_, Inner>, key: ChunkKey, proactive: bool) -> Result<(), HostError> {
        let (dirty, tick) = {
            let e = &g.entries[&key];
            (e.dirty, e.tick)
        };
        g.lru.remove(&tick);
        self.evictions.fetch_add(1, Ordering::Relaxed);
        if self.config.trace {
            g.events.push(BufferEvent::Evict { key, dirty, proactive });
        }
        if !dirty {
            g.entries.remove(&key);
            self.cond.notify_all();
            return Ok(());
        }
        let data = self.start_flush(g, key);
        let res = MutexGuard::unlocked(g, || self.backend.write_back(key, data));
        let out = res.clone();
        self.finish_locked(g, key, res, false);
        out
    }

    fn start_flush(&self, g: &mut MutexGuard<'_, Inner>, key: ChunkKey) -> Vec<u8> {
        let inner = &mut **g;
        let e = inner.entries.get_mut(&key).expect("flush of present entry");
        e.dirty = false;
        e.flushing += 1;
        e.evicted = true;
        inner.evicting += 1;
        e.data.clone()
    }

    /// Pick proactive victims after an insert. Clean ones are dropped here;
    /// dirty ones are returned for the background writer.
    fn proactive_victims(&self, g: &mut MutexGuard<'_, Inner>) -> Vec<(ChunkKey, Vec<u8>)> {
        let mut jobs = Vec::new();
        if self.config.load_threshold >= 1.0 {
            return jobs;
        }
        let live = g.entries.len() - g.evicting;
        if live < self.high {
            return jobs;
        }
        if self.config.trace {
            g.events.push(BufferEvent::ProactiveStart { occupancy: live });
        }
        let mut live = live;
        while live > self.low {
            let Some(key) = self.oldest_evictable(g) else { break };
            let (dirty, tick) = {
                let e = &g.entries[&key];
                (e.dirty, e.tick)
            };
            g.lru.remove(&tick);
            self.evictions.fetch_add(1, Ordering::Relaxed);
            self.proactive.fetch_add(1, Ordering::Relaxed);
            if self.config.trace {
                g.events.push(BufferEvent::Evict { key, dirty, proactive: true });
            }
            if dirty {
                let data = self.start_flush(g, key);
                jobs.push((key, data));
            } else {
                g.entries.remove(&key);
            }
            live -= 1;
        }
        jobs
    }

    fn finish_flush(&self, key: ChunkKey, res: Result<(), HostError>, background: bool) {
        let mut g = self.inner.lock();
        self.finish_locked(&mut g, key, res, background);
    }

    fn finish_locked(&self, g: &mut MutexGuard<'_, Inner>, key: ChunkKey, res: Result<(), HostError>, background: bool) {
        let inner = &mut **g;
        if background {
            inner.background_jobs -= 1;
        }
        match res {
            Ok(()) => {
                self.write_backs.fetch_add(1, Ordering::Relaxed);
                if self.config.trace {
                    inner.events.push(BufferEvent::WriteBackDone(key));
                }
            }
            Err(e) => {
                warn!("write-back of {key:?} failed: {e}");
                if let Some(entry) = inner.entries.get_mut(&key) {
                    entry.dirty = true;
                }
                inner.background_error.get_or_insert(e);
            }
        }
        let remove = match inner.entries.get_mut(&key) {
            Some(e) => {
                e.flushing -= 1;
                e.flushing == 0 && e.evicted && !e.dirty
            }
            None => false,
        };
        if remove {
            inner.entries.remove(&key);
            inner.evicting -= 1;
        } else if let Some(e) = inner.entries.get_mut(&key) {
            // A failed write-back leaves an evicted entry dirty: put it back in the LRU.
            if e.flushing == 0 && e.evicted {
                e.evicted = false;
                inner.evicting -= 1;
                inner.lru.insert(e.tick, key);
            }
        }
        self.cond.notify_all();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Default)]
    struct Mem {
        data: Mutex<HashMap<ChunkKey, Vec<u8>>>,
        fetches: AtomicU64,
    }

    impl ChunkBackend for Mem {
        fn fetch(&self, key: ChunkKey, len: usize) -> Result<Vec<u8>, HostError> {
            self.fetches.fetch_add(1, Ordering::Relaxed);
            Ok(self.data.lock().get(&key).cloned().unwrap_or_else(|| vec![0; len]))
        }
        fn write_back(&self, key: ChunkKey, data: Vec<u8>) -> Result<(), HostError> {
            self.data.lock().insert(key, data);
            Ok(())
        }
    }

    fn buffer(cap: usize, threshold: f64) -> (Arc<Mem>, PageBuffer) {
        let mem = Arc::new(Mem::default());
        let cfg = BufferConfig { capacity_chunks: cap, chunk_size: 4, load_threshold: threshold, low_water: 0.8, trace: true };
        (mem.clone(), PageBuffer::new(cfg, mem).unwrap())
    }

    fn touch(b: &PageBuffer, chunk: u64) {
        let mut out = [0u8; 1];
        b.read(1, 1 << 20, chunk * 4, &mut out).unwrap();
    }

    #[test]
    fn lru_victim() {
        let (_m, b) = buffer(2, 1.0);
        touch(&b, 0);
        touch(&b, 1);
        touch(&b, 0);
        touch(&b, 2);
        assert!(b.is_resident(ChunkKey::new(1, 0)));
        assert!(!b.is_resident(ChunkKey::new(1, 1)));
        assert_eq!(b.lru_order(), vec![ChunkKey::new(1, 0), ChunkKey::new(1, 2)]);
    }

    #[test]
    fn watermarks() {
        let (_m, b) = buffer(10, 0.9);
        assert_eq!((b.core.high, b.core.low), (9, 8));
        let (_m, b) = buffer(3, 1.0);
        assert_eq!(b.core.high, 3);
    }

    #[test]
    fn full_chunk_write_skips_fetch() {
        let (m, b) = buffer(4, 1.0);
        b.write(1, 16, 4, &[1, 2, 3, 4]).unwrap();
        assert_eq!(m.fetches.load(Ordering::Relaxed), 0);
        b.write(1, 16, 9, &[7]).unwrap();
        assert_eq!(m.fetches.load(Ordering::Relaxed), 1);
        // A short final chunk counts as full when completely covered.
        b.write(1, 14, 12, &[5, 6]).unwrap();
        assert_eq!(m.fetches.load(Ordering::Relaxed), 1);
    }

    #[test]
    fn flush_persists_dirty() {
        let (m, b) = buffer(4, 1.0);
        b.write(1, 16, 2, &[9, 9, 9, 9]).unwrap();
        b.flush().unwrap();
        assert_eq!(m.data.lock()[&ChunkKey::new(1, 0)], vec![0, 0, 9, 9]);
        assert_eq!(m.data.lock()[&ChunkKey::new(1, 1)], vec![9, 9, 0, 0]);
        assert!(!b.is_dirty(ChunkKey::new(1, 0)));
    }

    #[test]
    fn bad_config_rejected() {
        let mem: Arc<dyn ChunkBackend> = Arc::new(Mem::default());
        let cfg = BufferConfig { load_threshold: 0.0, ..Default::default() };
        assert!(PageBuffer::new(cfg, mem.clone()).is_err());
        let cfg = BufferConfig { load_threshold: 0.5, low_water: 0.6, ..Default::default() };
        assert!(PageBuffer::new(cfg, mem).is_err());
    }
}
