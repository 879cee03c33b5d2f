use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use farmem::dpu_cache::{CacheTable, GroupId};
use farmem::protocol::{ReadRequest, WriteRequest};
use farmem::{Cluster, FabricConfig, HostConfig, MemoryAgentConfig, ProxyConfig};

fn codec(c: &mut Criterion) {
    let read = ReadRequest { region_id: 3, page_offset: 17, dest_addr: 0xdead_0000, size: 65536, dest_rkey: 9 };
    let bytes = read.encode().unwrap();
    c.bench_function("read_request_encode", |b| b.iter(|| black_box(read).encode().unwrap()));
    c.bench_function("read_request_decode", |b| b.iter(|| ReadRequest::decode(black_box(&bytes)).unwrap()));
    let write = WriteRequest::new(3, 17, vec![7; 4096]);
    let wbytes = write.encode().unwrap();
    let mut g = c.benchmark_group("write_request");
    g.throughput(Throughput::Bytes(wbytes.len() as u64));
    g.bench_function("encode", |b| b.iter(|| black_box(&write).encode().unwrap()));
    g.bench_function("decode", |b| b.iter(|| WriteRequest::decode(black_box(&wbytes)).unwrap()));
    g.finish();
}

fn cache_table(c: &mut Criterion) {
    let t = CacheTable::new(64 << 10, 1024, 1).unwrap();
    for g in 0..64 {
        let ticket = t.begin_fill(GroupId::new(1, g)).unwrap();
        t.complete_fill(ticket, &[g as u8; 1024]);
    }
    let mut next = 0u64;
    c.bench_function("cache_lookup_pin_hit", |b| {
        b.iter(|| {
            next = (next + 1) % 64;
            let pin = t.lookup(GroupId::new(1, next)).pin().unwrap();
            let byte = pin.data()[0];
            black_box(byte)
        })
    });
}

fn host_paths(c: &mut Criterion) {
    let chunk = 4096u32;
    let direct = Cluster::direct(FabricConfig::default(), MemoryAgentConfig::default()).unwrap();
    let offload = Cluster::offload(FabricConfig::default(), MemoryAgentConfig::default(), ProxyConfig::new).unwrap();
    let mut g = c.benchmark_group("host_read");
    g.throughput(Throughput::Bytes(u64::from(chunk)));
    for (name, cluster) in [("direct", &direct), ("offload", &offload)] {
        let host = cluster.host(HostConfig { chunk_size: chunk, buffer_chunks: 4, ..HostConfig::default() }).unwrap();
        let h = host.fam_alloc(1 << 20, None, true).unwrap();
        host.fam_write(&h, 0, &vec![1; 1 << 20]).unwrap();
        host.flush().unwrap();
        g.bench_function(format!("{name}_resident"), |b| b.iter(|| host.fam_read(&h, 0, 64).unwrap()));
        let mut page = 0u64;
        g.bench_function(format!("{name}_miss"), |b| {
            b.iter_batched(
                || {
                    page = (page + 8) % 256;
                    page * u64::from(chunk)
                },
                |off| host.fam_read(&h, off, 64).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    g.finish();
}

criterion_group!(benches, codec, cache_table, host_paths);
criterion_main!(benches);
