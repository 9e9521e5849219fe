//! DropEdge and Critical DropEdge subgraph sampling, Erdős–Rényi random
//! graphs, and percolation sweeps over the connectivity regimes.
//!
//! Critical sampling keeps the fraction `ρ = |V| / (2|E|)` of edges, i.e.
//! about `n/2` edges — the critical edge count of a random graph, where the
//! largest component scales polynomially instead of spanning the graph.

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::graph::{Graph, UnionFind};
use crate::scalar::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Edge-sampling mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    /// Keep a fixed fraction of edges, `rate` in (0, 1].
    Fixed { rate: f64 },
    /// Keep `ρ = |V|/(2|E|)` of the edges (clamped to 1), recomputed from
    /// whatever graph is being sampled.
    Critical,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SampleConfig {
    pub mode: SampleMode,
    pub seed: u64,
    /// Draw a fresh subgraph every training epoch; off for one-shot kernel
    /// computation.
    pub resample_each_epoch: bool,
}

impl SampleConfig {
    pub fn critical(seed: u64) -> Self {
        SampleConfig {
            mode: SampleMode::Critical,
            seed,
            resample_each_epoch: true,
        }
    }

    pub fn fixed(rate: f64, seed: u64) -> Self {
        SampleConfig {
            mode: SampleMode::Fixed { rate },
            seed,
            resample_each_epoch: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let SampleMode::Fixed { rate } = self.mode {
            if !(rate > 0.0 && rate <= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "edge keep rate must lie in (0, 1], got {rate}"
                )));
            }
        }
        Ok(())
    }
}

/// The critical edge-preserving fraction `min(1, |V|/(2|E|))`.
pub fn critical_rate<T: Scalar>(graph: &Graph) -> Result<T> {
    if graph.edge_count() == 0 {
        return Err(Error::InvalidParameter(
            "critical rate undefined for an edgeless graph".into(),
        ));
    }
    let rho = T::from_count(graph.node_count()) / T::from_count(2 * graph.edge_count());
    Ok(rho.min(T::one()))
}

/// Number of edges kept for a rate: round half up, floor-bounded at 1.
fn kept_edges(rate: f64, edge_count: usize) -> usize {
    (((rate * edge_count as f64) + 0.5).floor() as usize).max(1)
}

/// Uniform sample of exactly `k` edges without replacement; the node set is
/// unchanged (the subgraph keeps isolated nodes). Deterministic in the seed.
pub fn sample_edges(graph: &Graph, config: &SampleConfig) -> Result<Graph> {
    sample_edges_seeded(graph, config, config.seed)
}

/// Like [`sample_edges`] but with an explicit seed (per-epoch streams are
/// derived from the config seed by the caller).
pub fn sample_edges_seeded(graph: &Graph, config: &SampleConfig, seed: u64) -> Result<Graph> {
    config.validate()?;
    if graph.edge_count() == 0 {
        return Err(Error::InvalidParameter("cannot sample an edgeless graph".into()));
    }
    let rate = match config.mode {
        SampleMode::Fixed { rate } => rate,
        SampleMode::Critical => critical_rate::<f64>(graph)?,
    };
    let e = graph.edge_count();
    let k = kept_edges(rate, e).min(e);
    let mut edges: Vec<(usize, usize)> = graph.edges().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Partial Fisher-Yates: the first k slots become the sample.
    for i in 0..k {
        let j = rng.random_range(i..e);
        edges.swap(i, j);
    }
    edges.truncate(k);
    Graph::from_edges(graph.node_count(), edges)
}

/// Erdős–Rényi G(n, p): every unordered pair independently with probability
/// `p`. Pairs are visited by geometric skips, so the cost is proportional to
/// the number of edges produced, not to n². Deterministic in the seed.
pub fn er_graph(n: usize, p: f64, seed: u64) -> Result<Graph> {
    if n < 2 {
        return Err(Error::InvalidParameter(format!("er_graph needs n >= 2, got {n}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!(
            "edge probability must lie in [0, 1], got {p}"
        )));
    }
    let total = n * (n - 1) / 2;
    let mut edges = Vec::new();
    if p >= 1.0 {
        for u in 0..n {
            for v in (u + 1)..n {
                edges.push((u, v));
            }
        }
    } else if p > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ln_q = (1.0 - p).ln();
        let mut cursor: usize = 0;
        loop {
            // Geometric(p) skip: floor(ln(1-U)/ln(1-p)) misses, then a hit.
            let u: f64 = rng.random();
            let skip = ((1.0 - u).ln() / ln_q).floor();
            if !skip.is_finite() || skip >= (total - cursor) as f64 {
                break;
            }
            cursor += skip as usize;
            edges.push(pair_from_index(n, cursor));
            cursor += 1;
            if cursor >= total {
                break;
            }
        }
    }
    Graph::from_edges(n, edges)
}

/// Decode a linear index over the upper triangle into (u, v), u < v, with
/// pairs ordered (0,1), (0,2), ..., (0,n-1), (1,2), ...
fn pair_from_index(n: usize, k: usize) -> (usize, usize) {
    // Row u starts at offset(u) = u·n - u(u+1)/2; invert by quadratic
    // formula, then fix up any floating-point off-by-one exactly.
    let nf = n as f64;
    let kf = k as f64;
    let mut u = ((2.0 * nf - 1.0 - ((2.0 * nf - 1.0).powi(2) - 8.0 * kf).sqrt()) / 2.0) as usize;
    u = u.min(n - 2);
    while row_offset(n, u) > k {
        u -= 1;
    }
    while u + 1 < n - 1 && row_offset(n, u + 1) <= k {
        u += 1;
    }
    let v = u + 1 + (k - row_offset(n, u));
    (u, v)
}

fn row_offset(n: usize, u: usize) -> usize {
    u * n - u * (u + 1) / 2
}

/// Size of the largest connected component and the number of components.
pub fn largest_component(graph: &Graph) -> (usize, usize) {
    graph.largest_component()
}

/// One percolation measurement.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PercolationRow {
    pub p: f64,
    pub trial: usize,
    pub largest_component: usize,
    pub components: usize,
}

/// Aggregate over trials at one probed probability.
#[derive(Debug, Clone, Serialize)]
pub struct PercolationPoint {
    pub p: f64,
    pub trials: usize,
    pub sizes: Vec<usize>,
    pub median: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PercolationStats {
    pub n: usize,
    pub rows: Vec<PercolationRow>,
    pub points: Vec<PercolationPoint>,
}

/// For each probability, generate `trials` independent G(n, p) graphs and
/// record largest-component sizes. Trials run in parallel on derived seeds,
/// so results are order-independent and deterministic.
pub fn percolation_sweep(
    n: usize,
    p_values: &[f64],
    trials: usize,
    seed: u64,
) -> Result<PercolationStats> {
    if trials < 10 {
        return Err(Error::InvalidParameter(format!(
            "need at least 10 trials, got {trials}"
        )));
    }
    let mut rows = Vec::with_capacity(p_values.len() * trials);
    let mut points = Vec::with_capacity(p_values.len());
    for (pi, &p) in p_values.iter().enumerate() {
        let results: Vec<(usize, usize)> = (0..trials)
            .into_par_iter()
            .map(|trial| {
                let s = derive_seed(seed, (pi * 1_000_003 + trial) as u64);
                let g = er_graph(n, p, s)?;
                Ok(g.largest_component())
            })
            .collect::<Result<_>>()?;
        let mut sizes: Vec<usize> = Vec::with_capacity(trials);
        for (trial, &(largest, components)) in results.iter().enumerate() {
            rows.push(PercolationRow {
                p,
                trial,
                largest_component: largest,
                components,
            });
            sizes.push(largest);
        }
        let mut sorted = sizes.clone();
        sorted.sort_unstable();
        let median = if trials % 2 == 1 {
            sorted[trials / 2] as f64
        } else {
            (sorted[trials / 2 - 1] + sorted[trials / 2]) as f64 / 2.0
        };
        let mean = sizes.iter().sum::<usize>() as f64 / trials as f64;
        points.push(PercolationPoint {
            p,
            trials,
            sizes,
            median,
            mean,
        });
    }
    Ok(PercolationStats { n, rows, points })
}

/// Critical edge probability of G(n, p): `1/(n-1)`.
pub fn critical_probability(n: usize) -> f64 {
    1.0 / (n as f64 - 1.0)
}

/// Sanity helper used by tests: union-find over an explicit edge list.
pub fn components_of_edges(n: usize, edges: &[(usize, usize)]) -> (usize, usize) {
    let mut uf = UnionFind::new(n);
    for &(u, v) in edges {
        uf.union(u, v);
    }
    uf.largest_and_count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn critical_rates_of_citation_benchmarks() {
        // (|V|, |E|) -> |V|/(2|E|): 2708/10858, 3327/9464, 19717/88676.
        let cases = [
            (2708usize, 5429usize, 24.94),
            (3327, 4732, 35.15),
            (19717, 44338, 22.23),
        ];
        for (n, e, pct) in cases {
            let rho = n as f64 / (2.0 * e as f64);
            assert!(
                (rho * 100.0 - pct).abs() < 0.01,
                "n={n}, e={e}: {}% vs {pct}%",
                rho * 100.0
            );
        }
    }

    #[test]
    fn critical_rate_clamps_to_one() {
        // Path of 3 nodes: 3/(2·2) = 0.75; star with 1 edge: 2/(2·1) = 1.0.
        let g = Graph::from_edges(3, [(0, 1), (1, 2)]).unwrap();
        assert!((critical_rate::<f64>(&g).unwrap() - 0.75).abs() < 1e-15);
        let g2 = Graph::from_edges(2, [(0, 1)]).unwrap();
        assert_eq!(critical_rate::<f64>(&g2).unwrap(), 1.0);
        let g3 = Graph::parse_edge_list("#nodes 4", "mem").unwrap();
        assert!(critical_rate::<f64>(&g3).is_err());
    }

    #[test]
    fn critical_sampling_keeps_half_the_nodes_in_edges() {
        // 6 nodes, 10 edges: keep round(6/2) = 3.
        let g = Graph::from_edges(
            6,
            [
                (0, 1),
                (0, 2),
                (0, 3),
                (1, 2),
                (1, 3),
                (2, 3),
                (2, 4),
                (3, 4),
                (4, 5),
                (3, 5),
            ],
        )
        .unwrap();
        let sampled = sample_edges(&g, &SampleConfig::critical(1)).unwrap();
        assert_eq!(sampled.edge_count(), 3);
        assert_eq!(sampled.node_count(), 6);
    }

    #[test]
    fn full_rate_keeps_the_graph() {
        let (g, _) = crate::graph::generate_sbm(30, 0.4, 0.1, 2).unwrap();
        let sampled = sample_edges(&g, &SampleConfig::fixed(1.0, 9)).unwrap();
        assert_eq!(sampled.edges(), g.edges());
    }

    #[test]
    fn sampling_is_deterministic_and_seed_sensitive() {
        let (g, _) = crate::graph::generate_sbm(40, 0.4, 0.1, 3).unwrap();
        let a = sample_edges(&g, &SampleConfig::fixed(0.5, 7)).unwrap();
        let b = sample_edges(&g, &SampleConfig::fixed(0.5, 7)).unwrap();
        assert_eq!(a, b);
        let c = sample_edges(&g, &SampleConfig::fixed(0.5, 8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn er_degenerate_probabilities() {
        let empty = er_graph(10, 0.0, 1).unwrap();
        assert_eq!(empty.edge_count(), 0);
        let full = er_graph(10, 1.0, 1).unwrap();
        assert_eq!(full.edge_count(), 45);
    }

    #[test]
    fn er_critical_probability_value() {
        assert!((critical_probability(100) - 0.010101010101).abs() < 1e-10);
    }

    #[test]
    fn er_edge_count_matches_binomial_mean() {
        // n=1000 at p_c: mean edges = C(n,2)·p = n/2 = 500, sigma ≈ 22.3.
        let n = 1000;
        let p = critical_probability(n);
        let trials = 200;
        let mean = (0..trials)
            .map(|t| er_graph(n, p, derive_seed(5, t)).unwrap().edge_count() as f64)
            .sum::<f64>()
            / trials as f64;
        let expected = (n * (n - 1) / 2) as f64 * p;
        let sigma = (expected * (1.0 - p)).sqrt() / (trials as f64).sqrt();
        assert!(
            (mean - expected).abs() < 4.0 * sigma,
            "mean {mean} vs {expected} (sigma {sigma})"
        );
    }

    #[test]
    fn components_of_simple_graphs() {
        let path = Graph::from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4)]).unwrap();
        assert_eq!(largest_component(&path), (5, 1));
        let edgeless = Graph::parse_edge_list("#nodes 7", "mem").unwrap();
        assert_eq!(largest_component(&edgeless), (1, 7));
        let two_triangles =
            Graph::from_edges(6, [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)]).unwrap();
        assert_eq!(largest_component(&two_triangles), (3, 2));
    }

    #[test]
    fn sweep_shapes_and_determinism() {
        let a = percolation_sweep(200, &[0.002, 0.02], 10, 3).unwrap();
        assert_eq!(a.rows.len(), 20);
        assert_eq!(a.points.len(), 2);
        let b = percolation_sweep(200, &[0.002, 0.02], 10, 3).unwrap();
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(x.largest_component, y.largest_component);
        }
        assert!(percolation_sweep(200, &[0.01], 5, 1).is_err());
    }

    proptest! {
        #[test]
        fn pair_index_decode_is_a_bijection(n in 2usize..40) {
            let mut k = 0usize;
            for u in 0..n {
                for v in (u + 1)..n {
                    prop_assert_eq!(pair_from_index(n, k), (u, v));
                    k += 1;
                }
            }
        }

        #[test]
        fn sampled_edges_are_a_subset_with_exact_count(
            seed in 0u64..500,
            rate_pct in 1usize..=100,
        ) {
            let (g, _) = crate::graph::generate_sbm(24, 0.5, 0.2, 11).unwrap();
            let rate = rate_pct as f64 / 100.0;
            let sampled = sample_edges(&g, &SampleConfig::fixed(rate, seed)).unwrap();
            let expected = (((rate * g.edge_count() as f64) + 0.5).floor() as usize)
                .max(1)
                .min(g.edge_count());
            prop_assert_eq!(sampled.edge_count(), expected);
            prop_assert_eq!(sampled.node_count(), g.node_count());
            for e in sampled.edges() {
                prop_assert!(g.edges().contains(e));
            }
        }
    }
}
