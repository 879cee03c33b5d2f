use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Csr, GraphError};

/// `m` edges with independent uniform endpoints over `n` vertices.
pub fn uniform(n: u64, m: u64, seed: u64) -> Result<Csr, GraphError> {
    if n == 0 && m > 0 {
        return Err(GraphError::Invalid("edges need vertices".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges: Vec<(u64, u64)> = (0..m).map(|_| (rng.gen_range(0..n), rng.gen_range(0..n))).collect();
    Csr::from_edges(n, &edges)
}

/// Quadrant probabilities of the recursive matrix generator; `d` is the
/// remainder.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RmatParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for RmatParams {
    fn default() -> Self {
        RmatParams { a: 0.57, b: 0.19, c: 0.19 }
    }
}

/// Skewed graph on `2^scale` vertices.
pub fn rmat(scale: u32, m: u64, p: RmatParams, seed: u64) -> Result<Csr, GraphError> {
    if scale > 40 {
        return Err(GraphError::Invalid(format!("scale {scale} too large")));
    }
    if !(p.a >= 0.0 && p.b >= 0.0 && p.c >= 0.0 && p.a + p.b + p.c <= 1.0) {
        return Err(GraphError::Invalid(format!("bad quadrant probabilities {p:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges: Vec<(u64, u64)> = (0..m)
        .map(|_| {
            let (mut s, mut d) = (0u64, 0u64);
            for _ in 0..scale {
                let x: f64 = rng.gen();
                let (bs, bd) = if x < p.a {
                    (0, 0)
                } else if x < p.a + p.b {
                    (0, 1)
                } else if x < p.a + p.b + p.c {
                    (1, 0)
                } else {
                    (1, 1)
                };
                s = s << 1 | bs;
                d = d << 1 | bd;
            }
            (s, d)
        })
        .collect();
    Csr::from_edges(1 << scale, &edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_sized() {
        let a = uniform(100, 1000, 3).unwrap();
        assert_eq!(a, uniform(100, 1000, 3).unwrap());
        assert_ne!(a, uniform(100, 1000, 4).unwrap());
        assert_eq!((a.num_vertices(), a.num_edges()), (100, 1000));
        let r = rmat(8, 2000, RmatParams::default(), 1).unwrap();
        assert_eq!((r.num_vertices(), r.num_edges()), (256, 2000));
        r.validate().unwrap();
    }

    #[test]
    fn rmat_is_skewed() {
        let r = rmat(10, 20_000, RmatParams::default(), 9).unwrap();
        let max = (0..r.num_vertices()).map(|v| r.neighbors(v).len()).max().unwrap();
        assert!(max > 20 * 20_000 / 1024);
    }
}
