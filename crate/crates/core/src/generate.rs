//! Seeded synthetic graphs for tests and benchmarks.

use std::collections::BTreeSet;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::balancer::even_split;
use crate::error::{Error, Result};
use crate::graph::{Edge, Graph, VertexId};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Path,
    Cycle,
    /// Vertex 0 points at every other vertex.
    Star,
    /// `k` disconnected random components over contiguous id ranges. Each
    /// has a ring so it is strongly connected, plus random edges of
    /// probability `p`.
    Components { k: usize, p: f64 },
    /// Directed G(n, p) without self-loops.
    Random { p: f64 },
}

impl FromStr for GraphKind {
    type Err = Error;

    /// Accepts `path`, `cycle`, `star`, `components` and `random`; the
    /// parameters default to `k = 2` and `p = 0.05`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "path" => Ok(GraphKind::Path),
            "cycle" => Ok(GraphKind::Cycle),
            "star" => Ok(GraphKind::Star),
            "components" => Ok(GraphKind::Components { k: 2, p: 0.05 }),
            "random" => Ok(GraphKind::Random { p: 0.05 }),
            other => Err(Error::Config(format!("unknown graph kind {other:?}"))),
        }
    }
}

fn check_p(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("edge probability must be in [0, 1], got {p}")));
    }
    Ok(())
}

/// Random edges among `lo..hi`, weights 1..=10. Skips ahead geometrically
/// instead of drawing once per pair.
fn random_edges(rng: &mut ChaCha8Rng, lo: u64, hi: u64, p: f64, out: &mut Vec<Edge>) {
    let n = hi - lo;
    if n < 2 || p <= 0.0 {
        return;
    }
    let pairs = n * (n - 1);
    let mut idx: u64 = 0;
    let log_q = (1.0 - p).ln();
    loop {
        if p < 1.0 {
            let u: f64 = rng.gen::<f64>();
            let skip = ((1.0 - u).ln() / log_q).floor();
            if !skip.is_finite() || skip >= (pairs - idx) as f64 {
                break;
            }
            idx += skip as u64;
        }
        if idx >= pairs {
            break;
        }
        let src = idx / (n - 1);
        let mut dst = idx % (n - 1);
        if dst >= src {
            dst += 1;
        }
        let w = rng.gen_range(1..=10) as f64;
        out.push(Edge::new(lo + src, lo + dst, w));
        idx += 1;
    }
}

/// Builds a graph with vertices `0..n`.
pub fn generate(kind: GraphKind, n: usize, seed: u64) -> Result<Graph> {
    if n == 0 {
        return Err(Error::Config("graph needs at least one vertex".into()));
    }
    let n64 = n as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    match kind {
        GraphKind::Path => edges.extend((1..n64).map(|i| Edge::new(i - 1, i, 1.0))),
        GraphKind::Cycle => {
            if n > 1 {
                edges.extend((0..n64).map(|i| Edge::new(i, (i + 1) % n64, 1.0)));
            }
        }
        GraphKind::Star => edges.extend((1..n64).map(|i| Edge::new(0, i, 1.0))),
        GraphKind::Components { k, p } => {
            check_p(p)?;
            if k == 0 || k > n {
                return Err(Error::Config(format!("cannot split {n} vertices into {k} components")));
            }
            let mut lo = 0;
            for size in even_split(n64, k) {
                let hi = lo + size;
                if size > 1 {
                    for i in lo..hi {
                        let next = if i + 1 == hi { lo } else { i + 1 };
                        edges.push(Edge::new(i, next, rng.gen_range(1..=10) as f64));
                    }
                }
                random_edges(&mut rng, lo, hi, p, &mut edges);
                lo = hi;
            }
        }
        GraphKind::Random { p } => {
            check_p(p)?;
            random_edges(&mut rng, 0, n64, p, &mut edges);
        }
    }
    let vertices: BTreeSet<VertexId> = (0..n64).map(VertexId).collect();
    Graph::new(vertices, edges)
}
