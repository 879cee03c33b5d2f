use std::time::Instant;

use sha2::{Digest, Sha256};

use super::report::{CorunReport, GraphSummary, Report, RunReport, SCHEMA_VERSION};
use super::{ExperimentError, ExperimentSpec};
use crate::cluster::Cluster;
use crate::dpu_cache::CacheMode;
use crate::fabric::{ClientId, LinkKind};
use crate::graphbench::{self, Csr, FamCsr};
use crate::host_agent::{AccessMode, HostConfig, HostStats};
use crate::memory_agent::MemoryAgentConfig;

const MAIN_CLIENT: ClientId = ClientId(1);
const CORUN_CLIENT: ClientId = ClientId(2);

/// Build the configured graph and run the experiment on it.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Report, ExperimentError> {
    spec.validate()?;
    let csr = spec.graph.build()?;
    run_with_graph(spec, &csr)
}

/// Run the experiment on an already built graph. `spec.graph` is only
/// recorded.
pub fn run_with_graph(spec: &ExperimentSpec, csr: &Csr) -> Result<Report, ExperimentError> {
    spec.validate()?;
    let graph = summarize(spec, csr);
    let buffer_chunks = graph.buffer_chunks;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.threads)
        .build()
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    let mut runs = Vec::with_capacity(spec.repetitions);
    for rep in 0..spec.repetitions {
        log::info!("{}: repetition {} of {}", spec.name, rep + 1, spec.repetitions);
        runs.push(run_once(spec, csr, buffer_chunks, &pool)?);
    }
    Ok(Report { schema_version: SCHEMA_VERSION, spec: spec.clone(), graph, runs })
}

/// Footprint of `csr` once stored, and the host buffer size `spec` gives it.
pub fn summarize(spec: &ExperimentSpec, csr: &Csr) -> GraphSummary {
    let lengths = FamCsr::object_lengths(csr);
    let chunk = u64::from(spec.host.chunk_size);
    let chunks: u64 = lengths.iter().map(|l| l.div_ceil(chunk)).sum();
    let buffer_chunks = spec
        .host
        .buffer_chunks
        .unwrap_or_else(|| ((spec.host.buffer_fraction * chunks as f64).ceil() as usize).max(1));
    GraphSummary { vertices: csr.num_vertices(), edges: csr.num_edges(), footprint_bytes: lengths.iter().sum(), chunks, buffer_chunks }
}

/// Host settings `spec` gives `client`.
pub fn host_config(spec: &ExperimentSpec, client: ClientId, buffer_chunks: usize) -> HostConfig {
    HostConfig {
        client,
        mode: spec.mode,
        chunk_size: spec.host.chunk_size,
        buffer_chunks,
        load_threshold: spec.host.load_threshold,
        low_water: spec.host.low_water,
        qp_count: spec.fabric.qp_count,
        ..HostConfig::default()
    }
}

/// Lowercase hex SHA-256, as used for `output_sha256`.
pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn run_once(spec: &ExperimentSpec, csr: &Csr, buffer_chunks: usize, pool: &rayon::ThreadPool) -> Result<RunReport, ExperimentError> {
    let dir = tempfile::tempdir()?;
    let fabric = spec.fabric.build()?;
    let mc = MemoryAgentConfig { data_dir: dir.path().to_path_buf(), ..MemoryAgentConfig::default() };
    let cluster = match spec.mode {
        AccessMode::Direct => Cluster::direct(fabric, mc)?,
        AccessMode::Offload => Cluster::offload(fabric, mc, |m| spec.proxy.build(m, spec.host.chunk_size))?,
    };
    let host_config = |client| host_config(spec, client, buffer_chunks);
    let host = cluster.host(host_config(MAIN_CLIENT))?;
    let graph = FamCsr::preload(&host, csr, dir.path(), "graph")?;

    let before = cluster.fabric.counters();
    if spec.proxy.static_vertices {
        for h in graph.vertex_objects() {
            host.static_load(&h, 0, h.chunks())?;
        }
    }
    let corun_host = match &spec.corun {
        Some(_) => Some(cluster.host(host_config(CORUN_CLIENT))?),
        None => None,
    };

    let started = Instant::now();
    let (main, corun) = std::thread::scope(|s| {
        let corun = spec.corun.as_ref().zip(corun_host.as_ref()).map(|(c, h)| {
            let objects = graph.objects();
            s.spawn(move || -> Result<(Vec<u8>, HostStats), ExperimentError> {
                let g = FamCsr::open(h, objects)?;
                let out = pool.install(|| graphbench::run(c.application, &g, &c.params))?;
                Ok((out.to_bytes(), h.stats()))
            })
        });
        let main = pool.install(|| graphbench::run(spec.application, &graph, &spec.params)).map(|o| (o.to_bytes(), started.elapsed()));
        (main, corun.map(|t| t.join().expect("co-run thread panicked")))
    });
    let (output, wall) = main?;
    let corun = match (corun, &spec.corun) {
        (Some(r), Some(c)) => {
            let (bytes, stats) = r?;
            Some(CorunReport { application: c.application, client: CORUN_CLIENT.0, output_sha256: digest(&bytes), host: stats })
        }
        _ => None,
    };
    let traffic = cluster.fabric.counters().since(&before);

    let host_stats = host.stats();
    let proxy = cluster.proxy.as_ref().map(|p| p.stats());
    let cache = cluster.proxy.as_ref().and_then(|p| p.cache_stats());
    let hit_rate = match spec.proxy.cache_mode {
        _ if spec.mode == AccessMode::Direct => None,
        CacheMode::Off => None,
        CacheMode::Static => {
            let served = host_stats.static_reads + host_stats.read_requests;
            (served > 0).then(|| host_stats.static_reads as f64 / served as f64)
        }
        CacheMode::Dynamic => cache.and_then(|c| (c.lookups > 0).then(|| c.hits as f64 / c.lookups as f64)),
    };
    let modeled_secs = LinkKind::ALL.iter().map(|&k| traffic.link(k).modeled_secs).sum();
    Ok(RunReport {
        wall_secs: wall.as_secs_f64(),
        modeled_secs,
        traffic,
        output_sha256: digest(&output),
        host: host_stats,
        corun,
        proxy,
        cache,
        hit_rate,
    })
}
