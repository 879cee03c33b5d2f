use criterion::{criterion_group, criterion_main, Criterion};
use farmem::graphbench::{run, uniform, AlgoParams, Algorithm, FamCsr, MemGraph};
use farmem::{CacheMode, Cluster, FabricConfig, HostConfig, MemoryAgentConfig, ProxyConfig};

fn algorithms(c: &mut Criterion) {
    let csr = uniform(1 << 12, 1 << 15, 1).unwrap();
    let mem = MemGraph::new(csr.clone());
    let dir = std::env::temp_dir().join(format!("farmem-bench-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let mc = MemoryAgentConfig { data_dir: dir.clone(), ..MemoryAgentConfig::default() };
    let cluster = Cluster::offload(FabricConfig::default(), mc, |m| ProxyConfig { cache_mode: CacheMode::Static, ..ProxyConfig::new(m) }).unwrap();
    let host = cluster.host(HostConfig { chunk_size: 4096, buffer_chunks: 32, ..HostConfig::default() }).unwrap();
    let fam = FamCsr::preload(&host, &csr, &dir, "bench").unwrap();
    for h in fam.vertex_objects() {
        host.static_load(&h, 0, h.chunks()).unwrap();
    }
    let p = AlgoParams { iterations: 3, radii_samples: 16, ..AlgoParams::default() };
    let mut g = c.benchmark_group("graph");
    g.sample_size(10);
    for a in [Algorithm::Bfs, Algorithm::Pagerank, Algorithm::Cc] {
        g.bench_function(format!("{a}_in_memory"), |b| b.iter(|| run(a, &mem, &p).unwrap()));
        g.bench_function(format!("{a}_offload_static"), |b| b.iter(|| run(a, &fam, &p).unwrap()));
    }
    g.finish();
    let _ = std::fs::remove_dir_all(&dir);
}

criterion_group!(benches, algorithms);
criterion_main!(benches);
