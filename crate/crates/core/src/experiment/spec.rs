use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::dpu_agent::{self, ProxyConfig};
use crate::dpu_cache::{self, CacheMode};
use crate::fabric::{EndpointId, FabricConfig, LinkKind, LinkProfile};
use crate::graphbench::{self, AlgoParams, Algorithm, Csr, RmatParams};
use crate::host_agent::AccessMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Uniform,
    Rmat,
    /// Edge list or binary CSR at `path`.
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSpec {
    pub kind: GraphKind,
    /// Vertex count of a uniform graph.
    pub vertices: u64,
    pub edges: u64,
    /// log2 of the vertex count of an R-MAT graph.
    pub scale: u32,
    pub seed: u64,
    pub path: Option<PathBuf>,
    pub rmat: RmatParams,
}

impl Default for GraphSpec {
    fn default() -> Self {
        GraphSpec { kind: GraphKind::Rmat, vertices: 1 << 14, edges: 1 << 18, scale: 14, seed: 1, path: None, rmat: RmatParams::default() }
    }
}

impl GraphSpec {
    pub fn build(&self) -> Result<Csr, ExperimentError> {
        Ok(match self.kind {
            GraphKind::Uniform => graphbench::uniform(self.vertices, self.edges, self.seed)?,
            GraphKind::Rmat => graphbench::rmat(self.scale, self.edges, self.rmat, self.seed)?,
            GraphKind::File => {
                let path = self.path.as_deref().ok_or_else(|| ExperimentError::Config("graph.path is required for kind = \"file\"".into()))?;
                load_graph_file(path)?
            }
        })
    }
}

/// Binary CSR if the file starts with the binary magic, else an edge list.
pub fn load_graph_file(path: &Path) -> Result<Csr, ExperimentError> {
    let file_err = |source| graphbench::GraphError::File { path: path.to_path_buf(), source };
    let bytes = std::fs::read(path).map_err(file_err)?;
    if bytes.starts_with(&graphbench::BINARY_MAGIC) {
        Ok(graphbench::read_binary(&bytes[..])?)
    } else {
        Ok(graphbench::read_edge_list(&bytes[..])?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FabricSpec {
    pub header_overhead: u64,
    pub net_bandwidth: f64,
    pub net_latency: f64,
    pub intra_bandwidth: f64,
    pub intra_latency: f64,
    pub qp_count: usize,
}

impl Default for FabricSpec {
    fn default() -> Self {
        let c = FabricConfig::default();
        FabricSpec {
            header_overhead: c.header_overhead,
            net_bandwidth: c.net.bandwidth(),
            net_latency: c.net.latency(),
            intra_bandwidth: c.intra.bandwidth(),
            intra_latency: c.intra.latency(),
            qp_count: c.qp_count,
        }
    }
}

impl FabricSpec {
    pub fn build(&self) -> Result<FabricConfig, ExperimentError> {
        let bad = |e: crate::fabric::FabricError| ExperimentError::Config(e.to_string());
        Ok(FabricConfig {
            header_overhead: self.header_overhead,
            net: LinkProfile::new(LinkKind::Net, self.net_bandwidth, self.net_latency).map_err(bad)?,
            intra: LinkProfile::new(LinkKind::Intra, self.intra_bandwidth, self.intra_latency).map_err(bad)?,
            qp_count: self.qp_count,
            ..FabricConfig::default()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HostSpec {
    pub chunk_size: u32,
    /// Buffer size as a fraction of the graph's chunk footprint.
    pub buffer_fraction: f64,
    /// Absolute buffer size; overrides `buffer_fraction`.
    pub buffer_chunks: Option<usize>,
    pub load_threshold: f64,
    pub low_water: f64,
}

impl Default for HostSpec {
    fn default() -> Self {
        HostSpec {
            chunk_size: crate::host_agent::DEFAULT_CHUNK_SIZE,
            buffer_fraction: 1.0 / 3.0,
            buffer_chunks: None,
            load_threshold: 0.9,
            low_water: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxySpec {
    pub aggregation: bool,
    pub max_batch: usize,
    pub queue_depth: usize,
    pub dpu_memory: u64,
    pub cache_mode: CacheMode,
    pub cache_bytes: u64,
    pub entry_bytes: usize,
    pub prefetch_degree: u64,
    pub hit_window: usize,
    pub hysteresis: f64,
    pub adaptive: bool,
    /// Pin the vertex objects in the proxy before the run.
    pub static_vertices: bool,
    pub seed: u64,
}

impl Default for ProxySpec {
    fn default() -> Self {
        ProxySpec {
            aggregation: true,
            max_batch: dpu_agent::DEFAULT_MAX_BATCH,
            queue_depth: dpu_agent::DEFAULT_QUEUE_DEPTH,
            dpu_memory: dpu_agent::DEFAULT_DPU_MEMORY,
            cache_mode: CacheMode::Off,
            cache_bytes: dpu_agent::DEFAULT_CACHE_BYTES,
            entry_bytes: dpu_cache::DEFAULT_ENTRY_BYTES,
            prefetch_degree: dpu_cache::DEFAULT_PREFETCH_DEGREE,
            hit_window: dpu_cache::DEFAULT_HIT_WINDOW,
            hysteresis: dpu_cache::DEFAULT_HYSTERESIS,
            adaptive: true,
            static_vertices: false,
            seed: 1,
        }
    }
}

impl ProxySpec {
    pub fn build(&self, memory: EndpointId, default_chunk_size: u32) -> ProxyConfig {
        ProxyConfig {
            aggregation: self.aggregation,
            max_batch: self.max_batch,
            queue_depth: self.queue_depth,
            dpu_memory: self.dpu_memory,
            cache_mode: self.cache_mode,
            cache_bytes: self.cache_bytes,
            entry_bytes: self.entry_bytes,
            prefetch_degree: self.prefetch_degree,
            hit_window: self.hit_window,
            hysteresis: self.hysteresis,
            adaptive: self.adaptive,
            seed: self.seed,
            default_chunk_size,
            ..ProxyConfig::new(memory)
        }
    }
}

/// A second host running alongside the measured application on the same
/// graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorunSpec {
    pub application: Algorithm,
    pub params: AlgoParams,
}

impl Default for CorunSpec {
    fn default() -> Self {
        CorunSpec { application: Algorithm::Bfs, params: AlgoParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub application: Algorithm,
    pub mode: AccessMode,
    pub repetitions: usize,
    /// Worker threads for the algorithms; 0 means one per core.
    pub threads: usize,
    pub graph: GraphSpec,
    pub params: AlgoParams,
    pub fabric: FabricSpec,
    pub host: HostSpec,
    pub proxy: ProxySpec,
    pub corun: Option<CorunSpec>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            name: "experiment".into(),
            application: Algorithm::Pagerank,
            mode: AccessMode::Offload,
            repetitions: 1,
            threads: 0,
            graph: GraphSpec::default(),
            params: AlgoParams::default(),
            fabric: FabricSpec::default(),
            host: HostSpec::default(),
            proxy: ProxySpec::default(),
            corun: None,
        }
    }
}

impl ExperimentSpec {
    /// Parse TOML and apply `key=value` overrides in order.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<ExperimentSpec, ExperimentError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let spec: ExperimentSpec = toml::Value::Table(table).try_into().map_err(|e| ExperimentError::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let fail = |m: String| Err(ExperimentError::Config(m));
        if self.repetitions == 0 {
            return fail("repetitions must be at least 1".into());
        }
        if self.host.chunk_size == 0 {
            return fail("host.chunk_size must be positive".into());
        }
        if !(self.host.buffer_fraction > 0.0 && self.host.buffer_fraction <= 1.0) && self.host.buffer_chunks.is_none() {
            return fail(format!("host.buffer_fraction {} outside (0, 1]", self.host.buffer_fraction));
        }
        if self.host.buffer_chunks == Some(0) {
            return fail("host.buffer_chunks must be positive".into());
        }
        if self.mode == AccessMode::Direct && (self.proxy.cache_mode != CacheMode::Off || self.proxy.static_vertices) {
            return fail("proxy caching needs mode = \"offload\"".into());
        }
        if self.proxy.static_vertices && self.proxy.cache_mode == CacheMode::Off {
            return fail("proxy.static_vertices needs cache_mode static or dynamic".into());
        }
        if self.graph.kind == GraphKind::File && self.graph.path.is_none() {
            return fail("graph.path is required for kind = \"file\"".into());
        }
        self.fabric.build()?;
        Ok(())
    }
}

/// Set a dotted `key=value` in a TOML table. The value is read as TOML and
/// falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), ExperimentError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ExperimentError::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ExperimentError::Config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let slot = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = slot.as_table_mut().ok_or_else(|| ExperimentError::Config(format!("{key}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
