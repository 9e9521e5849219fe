//! Undirected graph representation, edge-list ingestion, and synthetic
//! stochastic-block-model generation.
//!
//! Edges are stored canonically as `(u, v)` with `u < v`, deduplicated, and
//! without self-loops: the aggregation rule already adds the self term, so a
//! stored self-loop would double-count it. Isolated nodes are allowed.

use crate::data::LabelVector;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

/// Immutable undirected graph over nodes `0..node_count`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    node_count: usize,
    /// Canonical edge list: `u < v`, sorted, no duplicates.
    edges: Vec<(usize, usize)>,
    /// Per-node sorted neighbor lists, consistent with `edges`.
    neighbors: Vec<Vec<usize>>,
}

impl Graph {
    /// Build a graph from an edge iterator. Edges are canonicalized and
    /// deduplicated; self-loops and out-of-range ids are rejected.
    pub fn from_edges<I>(node_count: usize, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        if node_count == 0 {
            return Err(Error::InvalidParameter("node_count must be positive".into()));
        }
        let mut canonical = BTreeSet::new();
        for (u, v) in edges {
            if u == v {
                return Err(Error::InvalidParameter(format!("self-loop at node {u}")));
            }
            if u >= node_count || v >= node_count {
                return Err(Error::Dimension(format!(
                    "edge ({u}, {v}) exceeds node count {node_count}"
                )));
            }
            canonical.insert((u.min(v), u.max(v)));
        }
        let edges: Vec<_> = canonical.into_iter().collect();
        let mut neighbors = vec![Vec::new(); node_count];
        for &(u, v) in &edges {
            neighbors[u].push(v);
            neighbors[v].push(u);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        Ok(Graph {
            node_count,
            edges,
            neighbors,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.neighbors[u]
    }

    pub fn degree(&self, u: usize) -> usize {
        self.neighbors[u].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    /// Parse the text edge-list format: one `u v` pair per line, `#`-prefixed
    /// comments, and an optional `#nodes N` header overriding the node count
    /// (otherwise `1 + max id`).
    pub fn parse_edge_list(text: &str, origin: &str) -> Result<Self> {
        let mut declared: Option<usize> = None;
        let mut raw_edges = Vec::new();
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: origin.to_string(),
            line,
            msg,
        };
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(comment) = trimmed.strip_prefix('#') {
                let comment = comment.trim();
                if let Some(rest) = comment.strip_prefix("nodes") {
                    let n: usize = rest.trim().parse().map_err(|_| {
                        parse_err(lineno, format!("bad node count in header: {comment:?}"))
                    })?;
                    declared = Some(n);
                }
                continue;
            }
            let mut parts = trimmed.split_whitespace();
            let (a, b) = match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) => (a, b),
                _ => {
                    return Err(parse_err(
                        lineno,
                        format!("expected two integers, got {trimmed:?}"),
                    ))
                }
            };
            let u: usize = a
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad node id {a:?}")))?;
            let v: usize = b
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad node id {b:?}")))?;
            if u == v {
                return Err(parse_err(lineno, format!("self-loop on node {u}")));
            }
            raw_edges.push((u, v, lineno));
        }
        let max_id = raw_edges.iter().map(|&(u, v, _)| u.max(v)).max();
        let node_count = match (declared, max_id) {
            (Some(n), Some(m)) => {
                if m >= n {
                    let &(u, v, lineno) = raw_edges
                        .iter()
                        .find(|&&(u, v, _)| u.max(v) >= n)
                        .expect("offending edge exists");
                    return Err(parse_err(
                        lineno,
                        format!("edge ({u}, {v}) exceeds declared node count {n}"),
                    ));
                }
                n
            }
            (Some(n), None) => n,
            (None, Some(m)) => m + 1,
            (None, None) => {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    line: 0,
                    msg: "no edges and no #nodes header".into(),
                })
            }
        };
        Graph::from_edges(node_count, raw_edges.into_iter().map(|(u, v, _)| (u, v)))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse_edge_list(&text, &path.display().to_string())
    }

    /// Canonical serialization; re-loading the output reproduces the graph
    /// exactly (the header keeps isolated trailing nodes).
    pub fn to_edge_list_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "#nodes {}", self.node_count);
        for &(u, v) in &self.edges {
            let _ = writeln!(out, "{u} {v}");
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_edge_list_string())?;
        Ok(())
    }

    /// Connected components via union-find: `(size of largest, count)`.
    pub fn largest_component(&self) -> (usize, usize) {
        let mut uf = UnionFind::new(self.node_count);
        for &(u, v) in &self.edges {
            uf.union(u, v);
        }
        uf.largest_and_count()
    }

    pub fn component_count(&self) -> usize {
        self.largest_component().1
    }

    pub fn is_connected(&self) -> bool {
        self.component_count() == 1
    }

    /// Stable fingerprint of the canonical edge list (FNV-1a 64).
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |x: u64| {
            for byte in x.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        eat(self.node_count as u64);
        for &(u, v) in &self.edges {
            eat(u as u64);
            eat(v as u64);
        }
        h
    }
}

/// Two-block stochastic block model: intra-block pairs connect with `p_in`,
/// inter-block with `p_out`; labels are the block ids. Deterministic in the
/// seed. `n` must be even so the blocks are balanced.
pub fn generate_sbm(
    n: usize,
    p_in: f64,
    p_out: f64,
    seed: u64,
) -> Result<(Graph, LabelVector)> {
    if n == 0 || n % 2 != 0 {
        return Err(Error::InvalidParameter(format!(
            "sbm node count must be positive and even, got {n}"
        )));
    }
    if !(0.0..=1.0).contains(&p_in) || !(0.0..=1.0).contains(&p_out) || p_out >= p_in {
        return Err(Error::InvalidParameter(format!(
            "sbm probabilities must satisfy 0 <= p_out < p_in <= 1, got p_in={p_in}, p_out={p_out}"
        )));
    }
    let half = n / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if (u < half) == (v < half) { p_in } else { p_out };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let labels = LabelVector::from_classes((0..n).map(|u| usize::from(u >= half)), 2)?;
    Ok((Graph::from_edges(n, edges)?, labels))
}

/// Disjoint-set forest with path halving and union by size.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
    }

    /// Size of the largest set and the number of sets.
    pub fn largest_and_count(&mut self) -> (usize, usize) {
        let n = self.parent.len();
        let mut largest = 0;
        let mut count = 0;
        for x in 0..n {
            if self.find(x) == x {
                count += 1;
                largest = largest.max(self.size[x]);
            }
        }
        (largest, count)
    }
}
