#![allow(dead_code)]

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use farmem::dpu_agent::CacheStats;
use farmem::dpu_cache::{CacheTable, GroupId, Lookup};
use std::time::Duration;

use farmem::fabric::{Charge, EndpointId, LinkKind, LinkTraffic, Message, RecvQueue};
use farmem::protocol::{ReadRequest, RequestKind, WriteRequest};
use farmem::{CacheMode, ClientId, Cluster, Fabric, FabricConfig, HostConfig, MemoryAgentConfig, ProxyConfig};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic bytes for one cache group.
pub fn group_pattern(group: u64, len: usize) -> Vec<u8> {
    let mut out = vec![0u8; len];
    ChaCha8Rng::seed_from_u64(group.wrapping_mul(0x9e37_79b9_7f4a_7c15)).fill_bytes(&mut out);
    out
}

pub fn fnv(data: &[u8]) -> u64 {
    data.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

#[derive(Debug, Default)]
pub struct StressOutcome {
    pub ops: u64,
    pub hits: u64,
    pub fills: u64,
    pub corrupted: u64,
    pub forced_evictions: u64,
}

/// `workers` threads look up, pin, hold and verify random groups while one
/// more thread evicts and invalidates unpinned entries as fast as it can.
pub fn pin_stress(workers: usize, total_ops: u64, seed: u64) -> StressOutcome {
    const ENTRY: usize = 256;
    const SLOTS: u64 = 32;
    const GROUPS: u64 = 96;
    let table = Arc::new(CacheTable::new(SLOTS * ENTRY as u64, ENTRY, seed).unwrap());
    let sums: Arc<Vec<u64>> = Arc::new((0..GROUPS).map(|g| fnv(&group_pattern(g, ENTRY))).collect());
    let done = Arc::new(AtomicBool::new(false));
    let forced = Arc::new(AtomicU64::new(0));
    let evictor = {
        let (table, done, forced) = (table.clone(), done.clone(), forced.clone());
        std::thread::spawn(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe71c);
            while !done.load(Ordering::Relaxed) {
                if rng.gen_ratio(1, 8) {
                    table.invalidate(GroupId::new(1, rng.gen_range(0..GROUPS)));
                } else if table.evict_random().is_some() {
                    forced.fetch_add(1, Ordering::Relaxed);
                }
                std::thread::yield_now();
            }
        })
    };
    let per_worker = total_ops / workers as u64;
    let handles: Vec<_> = (0..workers)
        .map(|w| {
            let (table, sums) = (table.clone(), sums.clone());
            std::thread::spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(w as u64 + 1));
                let mut out = StressOutcome::default();
                let mut held = VecDeque::new();
                let check = |g: GroupId, data: &[u8]| u64::from(fnv(data) != sums[g.group as usize]);
                for _ in 0..per_worker {
                    out.ops += 1;
                    let g = GroupId::new(1, rng.gen_range(0..GROUPS));
                    match table.try_lookup(g) {
                        Lookup::Hit(pin) => {
                            out.hits += 1;
                            out.corrupted += check(pin.group, &pin.data());
                            held.push_back(pin);
                        }
                        Lookup::Pending => {}
                        Lookup::Miss => {
                            if let Some(ticket) = table.begin_fill(g) {
                                if table.complete_fill(ticket, &group_pattern(g.group, ENTRY)) {
                                    out.fills += 1;
                                }
                            }
                        }
                    }
                    if held.len() > rng.gen_range(0..4) {
                        let pin = held.pop_front().unwrap();
                        out.corrupted += check(pin.group, &pin.data());
                    }
                }
                for pin in held {
                    out.corrupted += check(pin.group, &pin.data());
                }
                out
            })
        })
        .collect();
    let mut total = StressOutcome::default();
    for h in handles {
        let o = h.join().unwrap();
        total.ops += o.ops;
        total.hits += o.hits;
        total.fills += o.fills;
        total.corrupted += o.corrupted;
    }
    done.store(true, Ordering::Relaxed);
    evictor.join().unwrap();
    total.forced_evictions = forced.load(Ordering::Relaxed);
    total
}

pub struct ScanOutcome {
    pub net: LinkTraffic,
    pub cache: Option<CacheStats>,
    pub lookups: u64,
}

pub fn dynamic_proxy(p: &mut ProxyConfig) {
    p.cache_mode = CacheMode::Dynamic;
}

/// One host reads every chunk of a `region_bytes` object once, in order.
/// The object is seeded directly in the memory agent so that only the scan
/// crosses the fabric.
pub fn sequential_scan(region_bytes: u64, chunk: u32, tweak: impl FnOnce(&mut ProxyConfig)) -> ScanOutcome {
    let c = Cluster::offload(FabricConfig::default(), MemoryAgentConfig::default(), |m| {
        let mut p = ProxyConfig::new(m);
        tweak(&mut p);
        p
    })
    .unwrap();
    let h = c.host(HostConfig { chunk_size: chunk, buffer_chunks: 16, ..HostConfig::default() }).unwrap();
    let f = h.fam_alloc(region_bytes, None, true).unwrap();
    let chunks = f.chunks();
    for i in 0..chunks {
        c.memory.serve_write(ClientId(1), f.region_id, i, &group_pattern(i, chunk as usize)).unwrap();
    }
    let before = c.fabric.counters();
    for i in 0..chunks {
        let got = h.fam_read(&f, i * u64::from(chunk), chunk as usize).unwrap();
        assert!(got == group_pattern(i, chunk as usize), "chunk {i} differs");
    }
    let lookups = h.stats().read_requests;
    let cache = c.proxy().cache_stats();
    let net = c.fabric.counters().since(&before).link(LinkKind::Net);
    ScanOutcome { net, cache, lookups }
}

/// Uniformly random chunk reads over an object `ratio` times the size of
/// the proxy cache.
pub fn random_reads(
    cache_bytes: u64,
    entry_bytes: usize,
    ratio: u64,
    chunk: u32,
    reads: u64,
    tweak: impl FnOnce(&mut ProxyConfig),
) -> CacheStats {
    let c = Cluster::offload(FabricConfig::default(), MemoryAgentConfig::default(), |m| {
        let mut p = ProxyConfig::new(m);
        p.cache_mode = CacheMode::Dynamic;
        p.cache_bytes = cache_bytes;
        p.entry_bytes = entry_bytes;
        tweak(&mut p);
        p
    })
    .unwrap();
    let h = c.host(HostConfig { chunk_size: chunk, buffer_chunks: 4, ..HostConfig::default() }).unwrap();
    let f = h.fam_alloc(cache_bytes * ratio, None, false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut issued = 0;
    while issued < reads {
        let i = rng.gen_range(0..f.chunks());
        let before = h.stats().read_requests;
        h.fam_read(&f, i * u64::from(chunk), 8).unwrap();
        issued += h.stats().read_requests - before;
    }
    c.proxy().cache_stats().unwrap()
}

/// A bare endpoint that speaks the wire protocol to the proxy.
pub struct Raw {
    pub fabric: Fabric,
    pub ep: EndpointId,
    pub proxy: EndpointId,
    pub rx: RecvQueue,
}

impl Raw {
    pub fn new(c: &Cluster, client: u32) -> Raw {
        let ep = c.fabric.create_endpoint(ClientId(client));
        c.fabric.connect_endpoints(ep, c.proxy().endpoint(), LinkKind::Intra);
        Raw { fabric: c.fabric.clone(), ep, proxy: c.proxy().endpoint(), rx: c.fabric.receiver(ep).unwrap() }
    }

    pub fn client(&self) -> ClientId {
        self.fabric.client_of(self.ep).unwrap()
    }

    pub fn read(&self, region_id: u16, chunk: u64, size: u32, token: u64) {
        let req = ReadRequest { region_id, page_offset: chunk, dest_addr: token, size, dest_rkey: 0 };
        let imm = RequestKind::Read.immediate();
        self.fabric.send(self.ep, self.proxy, imm, req.encode().unwrap().to_vec(), Charge::on_demand(self.client())).unwrap();
    }

    pub fn write(&self, region_id: u16, chunk: u64, data: Vec<u8>) {
        let bytes = WriteRequest::new(region_id, chunk, data).encode().unwrap();
        let imm = RequestKind::Write.immediate();
        self.fabric.send(self.ep, self.proxy, imm, bytes, Charge::on_demand(self.client())).unwrap();
    }

    pub fn recv(&self) -> Message {
        self.rx.recv_timeout(Duration::from_secs(10)).expect("response")
    }

    pub fn recv_n(&self, n: usize) -> Vec<Message> {
        (0..n).map(|_| self.recv()).collect()
    }
}
