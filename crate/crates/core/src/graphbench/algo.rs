//! Frontier-based parallel graph algorithms. Results do not depend on the
//! number of worker threads or on scheduling.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{GraphError, GraphView};

pub const UNREACHED: u64 = u64::MAX;
pub const DEFAULT_RADII_SAMPLES: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bfs {
    /// Hop count from the source, [`UNREACHED`] if unreachable.
    pub levels: Vec<u64>,
    /// Smallest-id parent on a shortest path; the source is its own parent.
    pub parents: Vec<u64>,
}

fn atomics(n: u64, init: impl Fn(u64) -> u64) -> Vec<AtomicU64> {
    (0..n).map(|v| AtomicU64::new(init(v))).collect()
}

fn plain(v: Vec<AtomicU64>) -> Vec<u64> {
    v.into_iter().map(AtomicU64::into_inner).collect()
}

fn check_vertex(g: &dyn GraphView, v: u64) -> Result<usize, GraphError> {
    if v < g.num_vertices() {
        Ok(v as usize)
    } else {
        Err(GraphError::Invalid(format!("vertex {v} >= {}", g.num_vertices())))
    }
}

fn sorted(parts: Vec<Vec<u64>>) -> Vec<u64> {
    let mut v = parts.concat();
    v.par_sort_unstable();
    v.dedup();
    v
}

/// Apply `f` to every out- and in-neighbor of `v`.
fn both_ways(
    g: &dyn GraphView,
    v: u64,
    buf: &mut Vec<u64>,
    mut f: impl FnMut(usize) -> Result<(), GraphError>,
) -> Result<(), GraphError> {
    g.out_neighbors(v, buf)?;
    for &w in buf.iter() {
        f(check_vertex(g, w)?)?;
    }
    g.in_neighbors(v, buf)?;
    for &w in buf.iter() {
        f(check_vertex(g, w)?)?;
    }
    Ok(())
}

pub fn bfs(g: &dyn GraphView, source: u64) -> Result<Bfs, GraphError> {
    let n = g.num_vertices();
    let s = check_vertex(g, source)?;
    let levels = atomics(n, |_| UNREACHED);
    let parents = atomics(n, |_| UNREACHED);
    levels[s].store(0, Ordering::Relaxed);
    parents[s].store(source, Ordering::Relaxed);
    let mut frontier = vec![source];
    let mut level = 0;
    while !frontier.is_empty() {
        let next = level + 1;
        let claimed = frontier
            .par_iter()
            .map_init(Vec::new, |buf, &u| {
                g.out_neighbors(u, buf)?;
                let mut mine = Vec::new();
                for &w in buf.iter() {
                    let wi = check_vertex(g, w)?;
                    match levels[wi].compare_exchange(UNREACHED, next, Ordering::AcqRel, Ordering::Acquire) {
                        Ok(_) => {
                            mine.push(w);
                            parents[wi].fetch_min(u, Ordering::AcqRel);
                        }
                        Err(l) if l == next => {
                            parents[wi].fetch_min(u, Ordering::AcqRel);
                        }
                        Err(_) => {}
                    }
                }
                Ok(mine)
            })
            .collect::<Result<Vec<_>, GraphError>>()?;
        frontier = sorted(claimed);
        level = next;
    }
    Ok(Bfs { levels: plain(levels), parents: plain(parents) })
}

/// Pull-style power iteration with uniform teleport; rank held by dangling
/// vertices is spread evenly. Ranks sum to 1.
pub fn pagerank(g: &dyn GraphView, damping: f64, iterations: usize) -> Result<Vec<f64>, GraphError> {
    if !(0.0..=1.0).contains(&damping) {
        return Err(GraphError::Invalid(format!("damping {damping} outside [0, 1]")));
    }
    let n = g.num_vertices();
    if n == 0 {
        return Ok(Vec::new());
    }
    let nf = n as f64;
    let degree = (0..n).into_par_iter().map(|v| g.out_degree(v)).collect::<Result<Vec<u64>, _>>()?;
    let mut rank = vec![1.0 / nf; n as usize];
    for _ in 0..iterations {
        let contrib: Vec<f64> = rank.iter().zip(&degree).map(|(&r, &d)| if d > 0 { r / d as f64 } else { 0.0 }).collect();
        let dangling: f64 = rank.iter().zip(&degree).filter(|(_, &d)| d == 0).map(|(&r, _)| r).sum();
        let base = (1.0 - damping) / nf + damping * dangling / nf;
        rank = (0..n)
            .into_par_iter()
            .map_init(Vec::new, |buf, v| {
                g.in_neighbors(v, buf)?;
                let mut sum = 0.0;
                for &u in buf.iter() {
                    sum += contrib[check_vertex(g, u)?];
                }
                Ok(base + damping * sum)
            })
            .collect::<Result<Vec<f64>, GraphError>>()?;
    }
    Ok(rank)
}

/// Weakly connected components by min-label propagation. Each vertex ends
/// with the smallest vertex id of its component.
pub fn connected_components(g: &dyn GraphView) -> Result<Vec<u64>, GraphError> {
    let n = g.num_vertices();
    let labels = atomics(n, |v| v);
    let mut frontier: Vec<u64> = (0..n).collect();
    while !frontier.is_empty() {
        let changed = frontier
            .par_iter()
            .map_init(Vec::new, |buf, &u| {
                let l = labels[u as usize].load(Ordering::Acquire);
                let mut mine = Vec::new();
                both_ways(g, u, buf, |w| {
                    if labels[w].fetch_min(l, Ordering::AcqRel) > l {
                        mine.push(w as u64);
                    }
                    Ok(())
                })?;
                Ok(mine)
            })
            .collect::<Result<Vec<_>, GraphError>>()?;
        frontier = sorted(changed);
    }
    Ok(plain(labels))
}

/// Eccentricity estimates from a simultaneous BFS out of up to 64 sampled
/// sources, ignoring edge direction. Each vertex gets its largest distance
/// to a sampled source, a lower bound on its eccentricity; vertices no
/// sample reaches get 0.
pub fn radii(g: &dyn GraphView, samples: usize, seed: u64) -> Result<Vec<u64>, GraphError> {
    let n = g.num_vertices();
    let k = samples.min(64).min(n as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sources = rand::seq::index::sample(&mut rng, n as usize, k).into_vec();
    let mut prev = vec![0u64; n as usize];
    for (bit, &s) in sources.iter().enumerate() {
        prev[s] |= 1 << bit;
    }
    let mut radius = vec![0u64; n as usize];
    let mut frontier: Vec<u64> = sources.iter().map(|&s| s as u64).collect();
    frontier.sort_unstable();
    let mut round = 0;
    while !frontier.is_empty() {
        round += 1;
        let next: Vec<AtomicU64> = prev.iter().map(|&b| AtomicU64::new(b)).collect();
        let grown = frontier
            .par_iter()
            .map_init(Vec::new, |buf, &u| {
                let bits = prev[u as usize];
                let mut mine = Vec::new();
                both_ways(g, u, buf, |w| {
                    let old = next[w].fetch_or(bits, Ordering::AcqRel);
                    if old | bits != old {
                        mine.push(w as u64);
                    }
                    Ok(())
                })?;
                Ok(mine)
            })
            .collect::<Result<Vec<_>, GraphError>>()?;
        frontier = sorted(grown);
        for &w in &frontier {
            radius[w as usize] = round;
        }
        prev = plain(next);
    }
    Ok(radius)
}

/// Single-source Brandes dependencies along out-edges. The source's own
/// entry is the sum over its successors, i.e. the number of vertices it
/// reaches.
pub fn betweenness(g: &dyn GraphView, source: u64) -> Result<Vec<f64>, GraphError> {
    let n = g.num_vertices() as usize;
    let levels = bfs(g, source)?.levels;
    let depth = levels.iter().filter(|&&l| l != UNREACHED).max().copied().unwrap_or(0) as usize;
    let mut by_level: Vec<Vec<u64>> = vec![Vec::new(); depth + 1];
    for (v, &l) in levels.iter().enumerate() {
        if l != UNREACHED {
            by_level[l as usize].push(v as u64);
        }
    }
    let mut sigma = vec![0.0f64; n];
    sigma[source as usize] = 1.0;
    for (l, level) in by_level.iter().enumerate().take(depth + 1).skip(1) {
        let counts = level
            .par_iter()
            .map_init(Vec::new, |buf, &w| {
                g.in_neighbors(w, buf)?;
                let mut s = 0.0;
                for &u in buf.iter() {
                    if levels[check_vertex(g, u)?] == l as u64 - 1 {
                        s += sigma[u as usize];
                    }
                }
                Ok(s)
            })
            .collect::<Result<Vec<f64>, GraphError>>()?;
        for (&w, s) in level.iter().zip(counts) {
            sigma[w as usize] = s;
        }
    }
    let mut delta = vec![0.0f64; n];
    for l in (0..depth).rev() {
        let deps = by_level[l]
            .par_iter()
            .map_init(Vec::new, |buf, &v| {
                g.out_neighbors(v, buf)?;
                let mut d = 0.0;
                for &w in buf.iter() {
                    let wi = check_vertex(g, w)?;
                    if levels[wi] == l as u64 + 1 {
                        d += sigma[v as usize] / sigma[wi] * (1.0 + delta[wi]);
                    }
                }
                Ok(d)
            })
            .collect::<Result<Vec<f64>, GraphError>>()?;
        for (&v, d) in by_level[l].iter().zip(deps) {
            delta[v as usize] = d;
        }
    }
    Ok(delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphbench::{Csr, MemGraph};

    fn graph(n: u64, edges: &[(u64, u64)]) -> MemGraph {
        MemGraph::new(Csr::from_edges(n, edges).unwrap())
    }

    fn undirected_path(n: u64) -> MemGraph {
        let e: Vec<_> = (0..n - 1).flat_map(|i| [(i, i + 1), (i + 1, i)]).collect();
        graph(n, &e)
    }

    #[test]
    fn bfs_path_and_isolated() {
        let mut e: Vec<_> = (0..3).map(|i| (i, i + 1)).collect();
        e.push((5, 0));
        let b = bfs(&graph(6, &e), 0).unwrap();
        assert_eq!(b.levels, vec![0, 1, 2, 3, UNREACHED, UNREACHED]);
        assert_eq!(b.parents[..4], [0, 0, 1, 2]);
        assert!(bfs(&graph(2, &[]), 2).is_err());
    }

    #[test]
    fn bfs_picks_smallest_parent() {
        let b = bfs(&graph(4, &[(0, 2), (0, 1), (2, 3), (1, 3)]), 0).unwrap();
        assert_eq!(b.parents[3], 1);
    }

    #[test]
    fn pagerank_two_cycle() {
        for iters in [0, 1, 7] {
            let r = pagerank(&graph(2, &[(0, 1), (1, 0)]), 0.85, iters).unwrap();
            assert!((r[0] - 0.5).abs() < 1e-15 && (r[1] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn cc_small_cases() {
        let two = connected_components(&graph(4, &[(0, 1), (3, 2)])).unwrap();
        assert_eq!(two, vec![0, 0, 2, 2]);
        let clique: Vec<_> = (0..5).flat_map(|a| (0..5).map(move |b| (a, b))).collect();
        assert_eq!(connected_components(&graph(5, &clique)).unwrap(), vec![0; 5]);
    }

    #[test]
    fn radii_single_vertex_and_path() {
        assert_eq!(radii(&graph(1, &[]), 64, 1).unwrap(), vec![0]);
        assert_eq!(radii(&undirected_path(4), 64, 1).unwrap(), vec![3, 2, 2, 3]);
    }

    #[test]
    fn betweenness_star_and_path() {
        let star: Vec<_> = (1..6).map(|l| (0, l)).collect();
        let d = betweenness(&graph(6, &star), 0).unwrap();
        assert_eq!(d, vec![5.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let d = betweenness(&graph(3, &[(0, 1), (1, 2)]), 0).unwrap();
        assert_eq!(d, vec![2.0, 1.0, 0.0]);
    }
}
