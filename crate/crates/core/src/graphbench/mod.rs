//! Graph workloads over fabric-attached memory.
//!
//! A graph is stored as CSR in four objects (out-offsets, out-edges,
//! in-offsets, in-edges) of little-endian `u64`. Algorithms see it only
//! through [`GraphView`], so the same code runs on plain arrays
//! ([`MemGraph`]) and on FAM-backed arrays ([`FamCsr`]).

mod algo;
mod csr;
mod fam;
mod gen;

use std::path::PathBuf;

pub use algo::{betweenness, bfs, connected_components, pagerank, radii, Bfs, DEFAULT_RADII_SAMPLES, UNREACHED};
pub use csr::{read_binary, read_edge_list, write_binary, write_edge_list, Csr, MemGraph, BINARY_MAGIC};
pub use fam::{CsrObjects, FamCsr};
pub use gen::{rmat, uniform, RmatParams};

use crate::host_agent::HostError;

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: vertex id {id} out of range for {n} vertices")]
    IdOverflow { line: usize, id: u64, n: u64 },
    #[error("binary graph: {0}")]
    Binary(String),
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Fam(#[from] HostError),
}

/// Read access to a directed graph in CSR form.
pub trait GraphView: Sync {
    fn num_vertices(&self) -> u64;
    fn num_edges(&self) -> u64;
    fn out_degree(&self, v: u64) -> Result<u64, GraphError>;
    /// Replace `buf` with the out-neighbors of `v` in storage order.
    fn out_neighbors(&self, v: u64, buf: &mut Vec<u64>) -> Result<(), GraphError>;
    fn in_neighbors(&self, v: u64, buf: &mut Vec<u64>) -> Result<(), GraphError>;
}

/// Which algorithm to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Bfs,
    Pagerank,
    Cc,
    Radii,
    Bc,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [Algorithm::Bfs, Algorithm::Pagerank, Algorithm::Cc, Algorithm::Radii, Algorithm::Bc];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Bfs => "bfs",
            Algorithm::Pagerank => "pagerank",
            Algorithm::Cc => "cc",
            Algorithm::Radii => "radii",
            Algorithm::Bc => "bc",
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown application {s:?}; expected one of bfs, pagerank, cc, radii, bc"))
    }
}

/// Parameters shared by the algorithms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AlgoParams {
    pub source: u64,
    pub damping: f64,
    pub iterations: usize,
    pub radii_samples: usize,
    pub seed: u64,
}

impl Default for AlgoParams {
    fn default() -> Self {
        AlgoParams { source: 0, damping: 0.85, iterations: 10, radii_samples: DEFAULT_RADII_SAMPLES, seed: 1 }
    }
}

/// Output of one algorithm run.
#[derive(Debug, Clone, PartialEq)]
pub enum Output {
    Levels(Bfs),
    Ranks(Vec<f64>),
    Labels(Vec<u64>),
    Radii(Vec<u64>),
    Dependencies(Vec<f64>),
}

impl Output {
    /// Canonical little-endian encoding; equal outputs encode identically.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let words = |out: &mut Vec<u8>, v: &[u64]| v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        let floats = |out: &mut Vec<u8>, v: &[f64]| v.iter().for_each(|x| out.extend_from_slice(&x.to_bits().to_le_bytes()));
        match self {
            Output::Levels(b) => {
                out.push(1);
                words(&mut out, &b.levels);
                words(&mut out, &b.parents);
            }
            Output::Ranks(r) => {
                out.push(2);
                floats(&mut out, r);
            }
            Output::Labels(l) => {
                out.push(3);
                words(&mut out, l);
            }
            Output::Radii(r) => {
                out.push(4);
                words(&mut out, r);
            }
            Output::Dependencies(d) => {
                out.push(5);
                floats(&mut out, d);
            }
        }
        out
    }
}

pub fn run(algorithm: Algorithm, g: &dyn GraphView, p: &AlgoParams) -> Result<Output, GraphError> {
    Ok(match algorithm {
        Algorithm::Bfs => Output::Levels(bfs(g, p.source)?),
        Algorithm::Pagerank => Output::Ranks(pagerank(g, p.damping, p.iterations)?),
        Algorithm::Cc => Output::Labels(connected_components(g)?),
        Algorithm::Radii => Output::Radii(radii(g, p.radii_samples, p.seed)?),
        Algorithm::Bc => Output::Dependencies(betweenness(g, p.source)?),
    })
}
