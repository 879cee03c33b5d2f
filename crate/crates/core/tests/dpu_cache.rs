mod common;

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use common::{pin_stress, random_reads, sequential_scan};
use farmem::dpu_cache::{
    prefetch_for, required_hit_rate, AdaptiveController, CacheModel, CacheTable, GroupId, GroupSource, HitRateMonitor,
    PrefetchCounters, RecentEntry, RecentList, RECENT_CAPACITY,
};
use farmem::fabric::LinkKind;
use farmem::protocol::ChunkAddr;
use farmem::{CacheMode, ClientId, Cluster, FabricConfig, HostConfig, MemoryAgentConfig, ProxyConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn pins_survive_concurrent_eviction() {
    let out = pin_stress(8, 200_000, 3);
    assert_eq!(out.ops, 200_000);
    assert_eq!(out.corrupted, 0);
    assert!(out.hits > 0 && out.fills > 0 && out.forced_evictions > 0, "{out:?}");
}

#[test]
fn recent_list_keeps_last_entries_in_order() {
    let r = RecentList::new();
    for i in 0..300u64 {
        r.push(RecentEntry { chunk: i, client: ClientId(0) });
        let want: Vec<u64> = (i.saturating_sub(RECENT_CAPACITY as u64 - 1)..=i).collect();
        let got: Vec<u64> = r.snapshot().iter().map(|e| e.chunk).collect();
        assert_eq!(got, want);
    }
}

#[test]
fn recent_list_concurrent_pushers_keep_per_thread_order() {
    let r = Arc::new(RecentList::new());
    let threads: Vec<_> = (0..4u32)
        .map(|t| {
            let r = r.clone();
            std::thread::spawn(move || {
                for i in 0..500u64 {
                    r.push(RecentEntry { chunk: i, client: ClientId(t) });
                }
            })
        })
        .collect();
    threads.into_iter().for_each(|t| t.join().unwrap());
    let snap = r.snapshot();
    assert_eq!(snap.len(), RECENT_CAPACITY);
    assert_eq!(r.pushes(), 2000);
    let mut last: HashMap<ClientId, u64> = HashMap::new();
    for e in snap {
        if let Some(prev) = last.insert(e.client, e.chunk) {
            assert!(e.chunk > prev);
        }
    }
}

/// Region of `groups` groups, one chunk per group word; every fetch
/// returns the group number repeated.
struct Scripted {
    groups: u64,
    entry: usize,
}

impl GroupSource for Scripted {
    fn locate(&self, chunk: u64) -> Option<GroupId> {
        let a = ChunkAddr::unpack(chunk);
        Some(GroupId::new(a.region_id, a.page_offset / 4)).filter(|g| g.group < self.groups)
    }

    fn group_count(&self, _region: u16) -> u64 {
        self.groups
    }

    fn fetch_group(&self, group: GroupId, _client: ClientId) -> Result<Vec<u8>, String> {
        Ok(vec![group.group as u8; self.entry])
    }
}

fn entry(chunk: u64) -> RecentEntry {
    RecentEntry { chunk: ChunkAddr::new(1, chunk).pack().unwrap(), client: ClientId(1) }
}

#[test]
fn scripted_accesses_match_prefetch_oracle() {
    let source = Scripted { groups: 40, entry: 64 };
    for degree in [0u64, 1, 3] {
        let table = CacheTable::new(64 * 64, 64, 1).unwrap();
        let counters = PrefetchCounters::default();
        let mut rng = ChaCha8Rng::seed_from_u64(degree);
        let mut oracle = BTreeSet::new();
        for step in 0..60 {
            let chunk = rng.gen_range(0..160u64);
            let group = chunk / 4;
            if step == 0 {
                assert!(!table.lookup(GroupId::new(1, group)).is_hit(), "cold cache hit");
            }
            let hit = table.lookup(GroupId::new(1, group)).is_hit();
            assert_eq!(hit, oracle.contains(&group), "step {step}, chunk {chunk}");
            prefetch_for(&table, &source, entry(chunk), degree, &counters);
            oracle.extend(group..(group + degree + 1).min(source.groups));
            let cached: BTreeSet<u64> = (0..source.groups).filter(|&g| table.contains(GroupId::new(1, g))).collect();
            assert_eq!(cached, oracle);
        }
    }
}

#[test]
fn miss_then_prefetch_then_adjacent_hit() {
    let source = Scripted { groups: 8, entry: 64 };
    let table = CacheTable::new(8 * 64, 64, 1).unwrap();
    let counters = PrefetchCounters::default();
    assert!(!table.lookup(GroupId::new(1, 2)).is_hit());
    prefetch_for(&table, &source, entry(8), 0, &counters);
    let pin = table.lookup(source.locate(entry(9).chunk).unwrap()).pin().expect("adjacent chunk hits");
    assert_eq!(pin.refcount(), 1);
    assert!(pin.data().iter().all(|&b| b == 2));
    drop(pin);
    assert!(!table.contains(GroupId::new(1, 3)));
}

#[test]
fn break_even_at_required_rate() {
    let m = CacheModel::new(65536.0, 1.0e9, 2.0e9).unwrap();
    let t = m.expected_fetch_time(0.5).unwrap();
    assert!((t - m.baseline_time()).abs() / m.baseline_time() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let b_net = rng.gen_range(1.0e8..1.0e10);
        let b_intra = b_net * rng.gen_range(1.0..8.0);
        let s = f64::from(rng.gen_range(1u32..1 << 24));
        let m = CacheModel::new(s, b_net, b_intra).unwrap();
        let r = required_hit_rate(b_net, b_intra).unwrap();
        let oracle_t = s / b_intra + (1.0 - r) * s / b_net;
        let t = m.expected_fetch_time(r).unwrap();
        assert!((t - s / b_net).abs() / (s / b_net) < 1e-12);
        assert!((t - oracle_t).abs() / oracle_t < 1e-12);
        assert!(!m.beneficial(r) && m.beneficial((r + 1e-6).min(1.0)) == (r < 1.0));
    }
}

/// Feed `hits` out of every `window` lookups into the monitor.
fn feed(monitor: &mut HitRateMonitor, ctl: &mut AdaptiveController, rate: f64) {
    let w = monitor.window();
    let hits = (rate * w as f64).round() as usize;
    for i in 0..w {
        monitor.record(i < hits);
        ctl.update(monitor);
    }
}

#[test]
fn controller_does_not_flap_inside_hysteresis_band() {
    let mut monitor = HitRateMonitor::new(100);
    let mut ctl = AdaptiveController::new(0.5, 0.05);
    feed(&mut monitor, &mut ctl, 0.56);
    assert!(ctl.enabled());
    for k in 0..50 {
        feed(&mut monitor, &mut ctl, if k % 2 == 0 { 0.47 } else { 0.53 });
    }
    assert!(ctl.enabled());
    assert_eq!(ctl.transitions(), 0);
    feed(&mut monitor, &mut ctl, 0.3);
    assert!(!ctl.enabled());
    for k in 0..50 {
        feed(&mut monitor, &mut ctl, if k % 2 == 0 { 0.47 } else { 0.53 });
    }
    assert!(!ctl.enabled());
    feed(&mut monitor, &mut ctl, 0.7);
    assert!(ctl.enabled());
    assert_eq!(ctl.transitions(), 2);
}

#[test]
fn sequential_scan_is_served_from_prefetched_groups() {
    let size = 16 << 20;
    let off = sequential_scan(size, 64 << 10, |_| {});
    let on = sequential_scan(size, 64 << 10, common::dynamic_proxy);
    let stats = on.cache.unwrap();
    assert_eq!(stats.lookups, on.lookups);
    let h = stats.hits as f64 / stats.lookups as f64;
    assert!(h > 0.9, "hit rate {h}");
    assert!((on.net.bytes_on_demand as f64) < 0.5 * off.net.bytes_on_demand as f64);
    assert_eq!(off.net.bytes_background, 0);
    for net in [&on.net, &off.net] {
        assert_eq!(net.bytes_on_demand + net.bytes_background, net.total_bytes());
        assert_eq!(net.payload_bytes + net.header_bytes, net.total_bytes());
    }
    assert_eq!(on.net.bytes_background, stats.prefetch_bytes + stats.table.fills * FabricConfig::default().header_overhead);
}

#[test]
fn uniform_random_hit_rate_tracks_cache_fraction() {
    let stats = random_reads(1 << 20, 64 << 10, 100, 4096, 3000, |p| {
        p.adaptive = false;
        p.hit_window = 1024;
    });
    let h = stats.window_hit_rate.unwrap();
    assert!((h - 0.01).abs() < 0.015, "hit rate {h}");
    assert!(stats.enabled);
}

#[test]
fn uniform_random_disables_caching_within_two_windows() {
    let stats = random_reads(1 << 20, 64 << 10, 100, 4096, 2100, |p| p.hit_window = 1024);
    assert!(!stats.enabled);
    assert!(stats.disabled_at.unwrap() <= 2 * 1024);
    assert_eq!(stats.transitions, 1);
}

#[test]
fn static_mode_bypasses_unloaded_chunks() {
    let c = Cluster::offload(FabricConfig::default(), MemoryAgentConfig::default(), |m| ProxyConfig {
        cache_mode: CacheMode::Static,
        ..ProxyConfig::new(m)
    })
    .unwrap();
    let h = c.host(HostConfig { chunk_size: 4096, ..HostConfig::default() }).unwrap();
    let f = h.fam_alloc(8 * 4096, None, false).unwrap();
    h.static_load(&f, 0, 4).unwrap();
    let before = c.fabric.counters();
    h.fam_read(&f, 6 * 4096, 16).unwrap();
    assert_eq!((h.stats().static_reads, h.stats().read_requests), (0, 1));
    assert_eq!(c.fabric.counters().since(&before).link(LinkKind::Net).payload_bytes, 4096);
    h.fam_read(&f, 4096, 16).unwrap();
    assert_eq!((h.stats().static_reads, h.stats().read_requests), (1, 1));
    assert!(c.proxy().cache_stats().is_none());
}
