use std::io::{BufRead, Read, Write};

use super::{GraphError, GraphView};

pub const BINARY_MAGIC: [u8; 8] = *b"CSRGRAF1";

/// Compressed sparse row adjacency in ordinary memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Csr {
    pub offsets: Vec<u64>,
    pub edges: Vec<u64>,
}

impl Csr {
    /// Build from an edge list. Edges keep their input order within each
    /// source; self-loops and duplicates are kept.
    pub fn from_edges(n: u64, edges: &[(u64, u64)]) -> Result<Csr, GraphError> {
        if let Some(&(s, d)) = edges.iter().find(|&&(s, d)| s >= n || d >= n) {
            return Err(GraphError::Invalid(format!("edge {s}->{d} outside {n} vertices")));
        }
        let mut offsets = vec![0u64; n as usize + 1];
        for &(s, _) in edges {
            offsets[s as usize + 1] += 1;
        }
        for i in 0..n as usize {
            offsets[i + 1] += offsets[i];
        }
        let mut next = offsets.clone();
        let mut out = vec![0u64; edges.len()];
        for &(s, d) in edges {
            out[next[s as usize] as usize] = d;
            next[s as usize] += 1;
        }
        Ok(Csr { offsets, edges: out })
    }

    pub fn num_vertices(&self) -> u64 {
        self.offsets.len() as u64 - 1
    }

    pub fn num_edges(&self) -> u64 {
        self.edges.len() as u64
    }

    pub fn neighbors(&self, v: u64) -> &[u64] {
        &self.edges[self.offsets[v as usize] as usize..self.offsets[v as usize + 1] as usize]
    }

    pub fn edge_list(&self) -> Vec<(u64, u64)> {
        (0..self.num_vertices()).flat_map(|v| self.neighbors(v).iter().map(move |&d| (v, d))).collect()
    }

    /// Reverse every edge. Sources of a vertex's in-edges appear in
    /// ascending order.
    pub fn transpose(&self) -> Csr {
        let rev: Vec<(u64, u64)> = self.edge_list().into_iter().map(|(s, d)| (d, s)).collect();
        Csr::from_edges(self.num_vertices(), &rev).expect("transpose of a valid graph")
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let n = self.num_vertices();
        if self.offsets.first() != Some(&0) || self.offsets.last() != Some(&self.num_edges()) {
            return Err(GraphError::Invalid("offsets must start at 0 and end at m".into()));
        }
        if self.offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(GraphError::Invalid("offsets decrease".into()));
        }
        if let Some(d) = self.edges.iter().find(|&&d| d >= n) {
            return Err(GraphError::Invalid(format!("edge target {d} >= {n}")));
        }
        Ok(())
    }
}

/// Parse `src dst` lines. `#` starts a comment; a `# vertices N` comment
/// fixes the vertex count, otherwise it is one more than the largest id.
pub fn read_edge_list(r: impl BufRead) -> Result<Csr, GraphError> {
    let mut declared = None;
    let mut edges = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let text = line.trim();
        if let Some(comment) = text.strip_prefix('#') {
            let mut words = comment.split_whitespace();
            if words.next() == Some("vertices") {
                let n = words
                    .next()
                    .and_then(|w| w.parse::<u64>().ok())
                    .ok_or_else(|| GraphError::Malformed { line: lineno, msg: "bad vertex count".into() })?;
                declared = Some(n);
            }
            continue;
        }
        if text.is_empty() {
            continue;
        }
        let mut words = text.split_whitespace();
        let mut id = || -> Result<u64, GraphError> {
            let w = words.next().ok_or_else(|| GraphError::Malformed { line: lineno, msg: format!("expected two ids: {text:?}") })?;
            w.parse::<u64>().map_err(|e| GraphError::Malformed { line: lineno, msg: format!("{w:?}: {e}") })
        };
        let (s, d) = (id()?, id()?);
        if words.next().is_some() {
            return Err(GraphError::Malformed { line: lineno, msg: format!("trailing fields: {text:?}") });
        }
        if let Some(n) = declared {
            if let Some(bad) = [s, d].into_iter().find(|&x| x >= n) {
                return Err(GraphError::IdOverflow { line: lineno, id: bad, n });
            }
        }
        if s == u64::MAX || d == u64::MAX {
            return Err(GraphError::IdOverflow { line: lineno, id: u64::MAX, n: u64::MAX });
        }
        edges.push((s, d));
    }
    let n = declared.unwrap_or_else(|| edges.iter().map(|&(s, d)| s.max(d) + 1).max().unwrap_or(0));
    Csr::from_edges(n, &edges)
}

pub fn write_edge_list(g: &Csr, mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "# vertices {}", g.num_vertices())?;
    for (s, d) in g.edge_list() {
        writeln!(w, "{s} {d}")?;
    }
    w.flush()
}

pub fn write_binary(g: &Csr, mut w: impl Write) -> std::io::Result<()> {
    w.write_all(&BINARY_MAGIC)?;
    w.write_all(&g.num_vertices().to_le_bytes())?;
    w.write_all(&g.num_edges().to_le_bytes())?;
    for x in g.offsets.iter().chain(&g.edges) {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()
}

pub fn read_binary(mut r: impl Read) -> Result<Csr, GraphError> {
    let mut word = [0u8; 8];
    r.read_exact(&mut word).map_err(|_| GraphError::Binary("truncated header".into()))?;
    if word != BINARY_MAGIC {
        return Err(GraphError::Binary("bad magic".into()));
    }
    let mut next = || -> Result<u64, GraphError> {
        r.read_exact(&mut word).map_err(|_| GraphError::Binary("truncated".into()))?;
        Ok(u64::from_le_bytes(word))
    };
    let n = next()?;
    let m = next()?;
    let offsets = (0..=n).map(|_| next()).collect::<Result<Vec<_>, _>>()?;
    let edges = (0..m).map(|_| next()).collect::<Result<Vec<_>, _>>()?;
    let g = Csr { offsets, edges };
    g.validate()?;
    Ok(g)
}

/// Both directions of a graph in ordinary memory.
#[derive(Debug, Clone)]
pub struct MemGraph {
    pub out: Csr,
    pub inn: Csr,
}

impl MemGraph {
    pub fn new(out: Csr) -> MemGraph {
        let inn = out.transpose();
        MemGraph { out, inn }
    }
}

impl GraphView for MemGraph {
    fn num_vertices(&self) -> u64 {
        self.out.num_vertices()
    }

    fn num_edges(&self) -> u64 {
        self.out.num_edges()
    }

    fn out_degree(&self, v: u64) -> Result<u64, GraphError> {
        Ok(self.out.neighbors(v).len() as u64)
    }

    fn out_neighbors(&self, v: u64, buf: &mut Vec<u64>) -> Result<(), GraphError> {
        buf.clear();
        buf.extend_from_slice(self.out.neighbors(v));
        Ok(())
    }

    fn in_neighbors(&self, v: u64, buf: &mut Vec<u64>) -> Result<(), GraphError> {
        buf.clear();
        buf.extend_from_slice(self.inn.neighbors(v));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_cycle() {
        let g = read_edge_list("0 1\n1 0\n".as_bytes()).unwrap();
        assert_eq!(g.offsets, vec![0, 1, 2]);
        assert_eq!(g.edges, vec![1, 0]);
    }

    #[test]
    fn empty_with_declared_vertices() {
        let g = read_edge_list("# vertices 3\n".as_bytes()).unwrap();
        assert_eq!(g.offsets, vec![0, 0, 0, 0]);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn self_loops_and_duplicates_kept() {
        let g = read_edge_list("# c\n2 2\n0 1\n0 1\n".as_bytes()).unwrap();
        assert_eq!(g.offsets, vec![0, 2, 2, 3]);
        assert_eq!(g.edges, vec![1, 1, 2]);
    }

    #[test]
    fn malformed_and_overflow_rejected() {
        assert!(matches!(read_edge_list("0\n".as_bytes()), Err(GraphError::Malformed { line: 1, .. })));
        assert!(matches!(read_edge_list("0 x\n".as_bytes()), Err(GraphError::Malformed { .. })));
        assert!(matches!(read_edge_list("0 1 2\n".as_bytes()), Err(GraphError::Malformed { .. })));
        assert!(matches!(read_edge_list("# vertices 2\n0 2\n".as_bytes()), Err(GraphError::IdOverflow { line: 2, id: 2, n: 2 })));
        assert!(matches!(read_edge_list("0 99999999999999999999\n".as_bytes()), Err(GraphError::Malformed { .. })));
    }

    #[test]
    fn binary_rejects_garbage() {
        assert!(read_binary(&b"nope"[..]).is_err());
        let mut bytes = Vec::new();
        write_binary(&Csr { offsets: vec![0, 1], edges: vec![0] }, &mut bytes).unwrap();
        bytes[16] = 9;
        assert!(read_binary(&bytes[..]).is_err());
        assert!(read_binary(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn transpose_reverses() {
        let g = Csr::from_edges(3, &[(0, 1), (0, 2), (2, 1)]).unwrap();
        let t = g.transpose();
        assert_eq!(t.neighbors(1), &[0, 2]);
        assert_eq!(t.neighbors(2), &[0]);
        assert_eq!(t.transpose(), g);
    }
}
