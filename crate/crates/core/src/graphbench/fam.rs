use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Csr, GraphError, GraphView};
use crate::host_agent::{FamHandle, HostAgent};

/// Region ids of a graph's four objects, enough for another host to map
/// them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsrObjects {
    pub vertices: u64,
    pub edges: u64,
    pub out_offsets: u16,
    pub out_edges: u16,
    pub in_offsets: u16,
    pub in_edges: u16,
}

/// CSR whose arrays live in fabric-attached memory. Every access goes
/// through the host agent.
pub struct FamCsr<'a> {
    host: &'a HostAgent,
    n: u64,
    m: u64,
    out_offsets: FamHandle,
    out_edges: FamHandle,
    in_offsets: FamHandle,
    in_edges: FamHandle,
}

fn encode(words: &[u64]) -> Vec<u8> {
    if words.is_empty() {
        return vec![0; 8];
    }
    words.iter().flat_map(|w| w.to_le_bytes()).collect()
}

fn arrays(g: &Csr) -> [Vec<u8>; 4] {
    let t = g.transpose();
    [encode(&g.offsets), encode(&g.edges), encode(&t.offsets), encode(&t.edges)]
}

const NAMES: [&str; 4] = ["out_offsets", "out_edges", "in_offsets", "in_edges"];

impl<'a> FamCsr<'a> {
    /// Byte lengths of the four objects `g` is stored as, in the order
    /// out_offsets, out_edges, in_offsets, in_edges.
    pub fn object_lengths(g: &Csr) -> [u64; 4] {
        let word = |k: u64| 8 * k.max(1);
        let (n, m) = (g.num_vertices(), g.num_edges());
        [word(n + 1), word(m), word(n + 1), word(m)]
    }

    /// Save the arrays as files in `data_dir` (the memory agent's data
    /// directory) and allocate read-only objects preloaded from them.
    pub fn preload(host: &'a HostAgent, g: &Csr, data_dir: &Path, tag: &str) -> Result<FamCsr<'a>, GraphError> {
        let mut handles = Vec::with_capacity(4);
        for (bytes, name) in arrays(g).iter().zip(NAMES) {
            let file = format!("{tag}.{name}.bin");
            let path = data_dir.join(&file);
            std::fs::write(&path, bytes).map_err(|source| GraphError::File { path, source })?;
            handles.push(host.fam_alloc(bytes.len() as u64, Some(&file), false)?);
        }
        Ok(Self::assemble(host, g.num_vertices(), g.num_edges(), &handles))
    }

    /// Allocate writable objects and fill them through the host buffer.
    pub fn write_through(host: &'a HostAgent, g: &Csr) -> Result<FamCsr<'a>, GraphError> {
        let mut handles = Vec::with_capacity(4);
        for bytes in arrays(g) {
            let h = host.fam_alloc(bytes.len() as u64, None, true)?;
            host.fam_write(&h, 0, &bytes)?;
            handles.push(h);
        }
        host.flush()?;
        Ok(Self::assemble(host, g.num_vertices(), g.num_edges(), &handles))
    }

    /// Map objects allocated by another host, read-only.
    pub fn open(host: &'a HostAgent, o: CsrObjects) -> Result<FamCsr<'a>, GraphError> {
        let ids = [o.out_offsets, o.out_edges, o.in_offsets, o.in_edges];
        let handles = ids.iter().map(|&id| host.fam_map(id, false)).collect::<Result<Vec<_>, _>>()?;
        if handles[0].length < (o.vertices + 1) * 8 || handles[1].length < o.edges * 8 {
            return Err(GraphError::Invalid("objects smaller than the graph".into()));
        }
        Ok(Self::assemble(host, o.vertices, o.edges, &handles))
    }

    fn assemble(host: &'a HostAgent, n: u64, m: u64, h: &[FamHandle]) -> FamCsr<'a> {
        FamCsr { host, n, m, out_offsets: h[0], out_edges: h[1], in_offsets: h[2], in_edges: h[3] }
    }

    pub fn objects(&self) -> CsrObjects {
        CsrObjects {
            vertices: self.n,
            edges: self.m,
            out_offsets: self.out_offsets.region_id,
            out_edges: self.out_edges.region_id,
            in_offsets: self.in_offsets.region_id,
            in_edges: self.in_edges.region_id,
        }
    }

    /// The offset arrays.
    pub fn vertex_objects(&self) -> [FamHandle; 2] {
        [self.out_offsets, self.in_offsets]
    }

    pub fn edge_objects(&self) -> [FamHandle; 2] {
        [self.out_edges, self.in_edges]
    }

    pub fn host(&self) -> &HostAgent {
        self.host
    }

    /// Bytes of all four objects.
    pub fn footprint(&self) -> u64 {
        [self.out_offsets, self.out_edges, self.in_offsets, self.in_edges].iter().map(|h| h.length).sum()
    }

    fn range(&self, offsets: &FamHandle, v: u64) -> Result<(u64, u64), GraphError> {
        if v >= self.n {
            return Err(GraphError::Invalid(format!("vertex {v} >= {}", self.n)));
        }
        let mut b = [0u8; 16];
        self.host.fam_read_into(offsets, v * 8, &mut b)?;
        let (lo, hi) = b.split_at(8);
        Ok((u64::from_le_bytes(lo.try_into().unwrap()), u64::from_le_bytes(hi.try_into().unwrap())))
    }

    fn list(&self, offsets: &FamHandle, edges: &FamHandle, v: u64, buf: &mut Vec<u64>) -> Result<(), GraphError> {
        let (start, end) = self.range(offsets, v)?;
        buf.clear();
        if end == start {
            return Ok(());
        }
        if end < start || end > self.m {
            return Err(GraphError::Invalid(format!("vertex {v}: offsets {start}..{end}")));
        }
        let mut bytes = vec![0u8; ((end - start) * 8) as usize];
        self.host.fam_read_into(edges, start * 8, &mut bytes)?;
        buf.extend(bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())));
        Ok(())
    }
}

impl GraphView for FamCsr<'_> {
    fn num_vertices(&self) -> u64 {
        self.n
    }

    fn num_edges(&self) -> u64 {
        self.m
    }

    fn out_degree(&self, v: u64) -> Result<u64, GraphError> {
        let (s, e) = self.range(&self.out_offsets, v)?;
        Ok(e.saturating_sub(s))
    }

    fn out_neighbors(&self, v: u64, buf: &mut Vec<u64>) -> Result<(), GraphError> {
        self.list(&self.out_offsets, &self.out_edges, v, buf)
    }

    fn in_neighbors(&self, v: u64, buf: &mut Vec<u64>) -> Result<(), GraphError> {
        self.list(&self.in_offsets, &self.in_edges, v, buf)
    }
}
