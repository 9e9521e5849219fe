//! Mean-aggregation operator over the closed neighborhood: the row-stochastic
//! matrix `M[u][v] = 1/(|N(u)|+1)` for `v` in `N(u) ∪ {u}`, its residual
//! convex combination `(1-δ)M + δI`, stationary distribution, and spectral
//! summary.
//!
//! The full transition matrix acting on vectorized kernels is the Kronecker
//! square of `M`; it is never materialized here — `apply` computes the
//! equivalent congruence `M X Mᵀ` directly on `n×n` matrices. Tests cross
//! check this against the explicit Kronecker matrix on small graphs.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::linalg::symmetric_eigenvalues;
use crate::scalar::Scalar;
use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::Serialize;

/// Sparse row-stochastic aggregation operator, optionally with a residual
/// identity component.
#[derive(Debug, Clone)]
pub struct AggregationOperator<T> {
    n: usize,
    /// Per row: sorted `(column, weight)` entries over the closed
    /// neighborhood; each row sums to one.
    rows: Vec<Vec<(usize, T)>>,
    residual_delta: Option<T>,
}

/// Build `M` from a graph; with `delta` present the operator represents
/// `(1-δ)M + δI`, which is still row-stochastic.
pub fn build_operator<T: Scalar>(graph: &Graph, delta: Option<T>) -> Result<AggregationOperator<T>> {
    if let Some(d) = delta {
        if d <= T::zero() || d >= T::one() {
            return Err(Error::InvalidParameter(format!(
                "residual delta must lie in (0, 1), got {d}"
            )));
        }
    }
    let n = graph.node_count();
    let rows = (0..n)
        .map(|u| {
            let weight = T::one() / T::from_count(graph.degree(u) + 1);
            let mut row: Vec<(usize, T)> = Vec::with_capacity(graph.degree(u) + 1);
            let mut pushed_self = false;
            for &v in graph.neighbors(u) {
                if !pushed_self && v > u {
                    row.push((u, weight));
                    pushed_self = true;
                }
                row.push((v, weight));
            }
            if !pushed_self {
                row.push((u, weight));
            }
            row
        })
        .collect();
    Ok(AggregationOperator {
        n,
        rows,
        residual_delta: delta,
    })
}

impl<T: Scalar> AggregationOperator<T> {
    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn residual_delta(&self) -> Option<T> {
        self.residual_delta
    }

    /// Entry of the effective operator (including the residual part).
    pub fn entry(&self, u: usize, v: usize) -> T {
        let base = self.rows[u]
            .iter()
            .find(|&&(col, _)| col == v)
            .map(|&(_, w)| w)
            .unwrap_or_else(T::zero);
        match self.residual_delta {
            None => base,
            Some(d) => {
                let id = if u == v { T::one() } else { T::zero() };
                (T::one() - d) * base + d * id
            }
        }
    }

    /// Dense form of the effective operator.
    pub fn to_dense(&self) -> Array2<T> {
        let mut m = Array2::zeros((self.n, self.n));
        for (u, row) in self.rows.iter().enumerate() {
            for &(v, w) in row {
                m[(u, v)] = w;
            }
        }
        if let Some(d) = self.residual_delta {
            m.mapv_inplace(|x| (T::one() - d) * x);
            for u in 0..self.n {
                m[(u, u)] += d;
            }
        }
        m
    }

    /// `Z = M X` for the base (non-residual) operator, rows independent.
    fn left_multiply_base(&self, x: &Array2<T>) -> Array2<T> {
        let cols = x.ncols();
        let mut out = Array2::zeros((self.n, cols));
        out.axis_iter_mut(ndarray::Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(u, mut out_row)| {
                for &(v, w) in &self.rows[u] {
                    let src = x.row(v);
                    for c in 0..cols {
                        out_row[c] += w * src[c];
                    }
                }
            });
        out
    }

    /// `Z = M X` for the effective operator (residual included).
    pub fn left_multiply(&self, x: &Array2<T>) -> Result<Array2<T>> {
        if x.nrows() != self.n {
            return Err(Error::Dimension(format!(
                "operator is {}x{} but input has {} rows",
                self.n,
                self.n,
                x.nrows()
            )));
        }
        let base = self.left_multiply_base(x);
        Ok(match self.residual_delta {
            None => base,
            Some(d) => {
                let mut out = base;
                out.mapv_inplace(|y| (T::one() - d) * y);
                out.scaled_add(d, x);
                out
            }
        })
    }

    /// `Z = Mᵀ X` for the effective operator (adjoint of `left_multiply`).
    pub fn left_multiply_transpose(&self, x: &Array2<T>) -> Result<Array2<T>> {
        if x.nrows() != self.n {
            return Err(Error::Dimension(format!(
                "operator is {}x{} but input has {} rows",
                self.n,
                self.n,
                x.nrows()
            )));
        }
        let cols = x.ncols();
        let mut base = Array2::zeros((self.n, cols));
        for (u, row) in self.rows.iter().enumerate() {
            let src = x.row(u);
            for &(v, w) in row {
                for c in 0..cols {
                    base[(v, c)] += w * src[c];
                }
            }
        }
        Ok(match self.residual_delta {
            None => base,
            Some(d) => {
                let mut out = base;
                out.mapv_inplace(|y| (T::one() - d) * y);
                out.scaled_add(d, x);
                out
            }
        })
    }

    /// Kernel aggregation step: `M X Mᵀ` for symmetric `X`, or the residual
    /// form `(1-δ) M X Mᵀ + δ X`. Symmetry is preserved exactly because the
    /// result is assembled from its upper triangle.
    pub fn apply(&self, x: &Array2<T>) -> Result<Array2<T>> {
        if x.nrows() != self.n || x.ncols() != self.n {
            return Err(Error::Dimension(format!(
                "operator is {}x{} but kernel is {}x{}",
                self.n,
                self.n,
                x.nrows(),
                x.ncols()
            )));
        }
        let z = self.left_multiply_base(x); // Z = M X
        let mut out = Array2::zeros((self.n, self.n));
        // out[u][v] = <Z_u, M_v> on the upper triangle, mirrored.
        let row_results: Vec<Vec<T>> = (0..self.n)
            .into_par_iter()
            .map(|u| {
                let zu = z.row(u);
                (u..self.n)
                    .map(|v| {
                        let mut acc = T::zero();
                        for &(c, w) in &self.rows[v] {
                            acc += w * zu[c];
                        }
                        acc
                    })
                    .collect()
            })
            .collect();
        for (u, vals) in row_results.into_iter().enumerate() {
            for (offset, val) in vals.into_iter().enumerate() {
                let v = u + offset;
                out[(u, v)] = val;
                out[(v, u)] = val;
            }
        }
        if let Some(d) = self.residual_delta {
            out.mapv_inplace(|y| (T::one() - d) * y);
            out.scaled_add(d, x);
        }
        Ok(out)
    }

    /// Closed-form stationary distribution of this chain:
    /// `π_u ∝ deg(u) + 1` (detailed balance), shared by the residual variant.
    pub fn closed_form_stationary(&self, graph: &Graph) -> Array1<T> {
        let total = T::from_count(2 * graph.edge_count() + graph.node_count());
        Array1::from_iter((0..self.n).map(|u| T::from_count(graph.degree(u) + 1) / total))
    }

    /// Symmetric similarity `S = B^{1/2} C B^{1/2}` of the base operator
    /// (`M = B C` with `B` the positive diagonal of inverse closed-neighbor
    /// counts and `C` the self-looped adjacency indicator), so `M` and `S`
    /// share real eigenvalues. The residual operator maps to `(1-δ)S + δI`.
    pub fn symmetric_similarity(&self) -> Array2<T> {
        let mut s = Array2::zeros((self.n, self.n));
        for (u, row) in self.rows.iter().enumerate() {
            let bu = row[0].1; // all weights in a row equal 1/(deg+1)
            for &(v, _) in row {
                let bv = self.rows[v][0].1;
                s[(u, v)] = (bu * bv).sqrt();
            }
        }
        if let Some(d) = self.residual_delta {
            s.mapv_inplace(|x| (T::one() - d) * x);
            for u in 0..self.n {
                s[(u, u)] += d;
            }
        }
        s
    }
}

/// Stationary distribution by power iteration on `πᵀ ← πᵀ M` to the given
/// tolerance. Requires a connected graph (the chain is then irreducible, and
/// aperiodic since every diagonal entry is positive).
pub fn stationary_distribution<T: Scalar>(
    op: &AggregationOperator<T>,
    graph: &Graph,
    tolerance: T,
    max_iterations: usize,
) -> Result<Array1<T>> {
    ensure_connected(graph)?;
    let n = op.node_count();
    let uniform = T::one() / T::from_count(n);
    let mut pi = vec![uniform; n];
    let mut next = vec![T::zero(); n];
    let mut residual = T::infinity();
    for _ in 0..max_iterations {
        // next = Mᵀ pi, with the residual identity component folded in.
        next.iter_mut().for_each(|x| *x = T::zero());
        for (u, row) in op.rows.iter().enumerate() {
            let pu = pi[u];
            for &(v, w) in row {
                next[v] += w * pu;
            }
        }
        if let Some(d) = op.residual_delta {
            for v in 0..n {
                next[v] = (T::one() - d) * next[v] + d * pi[v];
            }
        }
        let total: T = next.iter().copied().sum();
        next.iter_mut().for_each(|x| *x /= total);
        residual = pi
            .iter()
            .zip(next.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max);
        std::mem::swap(&mut pi, &mut next);
        if residual < tolerance {
            return Ok(Array1::from_vec(pi));
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iterations,
        residual: residual.as_f64(),
    })
}

/// Spectral facts of the aggregation chain.
#[derive(Debug, Clone, Serialize)]
pub struct SpectralSummary<T> {
    /// Leading eigenvalue; 1 up to roundoff for a stochastic matrix.
    pub lambda1: T,
    /// Second-largest eigenvalue, which governs kernel mixing per unit.
    pub lambda2: T,
    /// `1 - lambda2`.
    pub spectral_gap: T,
    /// Stationary distribution over nodes.
    pub stationary: Vec<T>,
    /// Residual weight of the operator, if any.
    pub delta: Option<T>,
}

/// Compute the spectral summary via the symmetric similarity matrix; the
/// stationary vector comes from power iteration at tolerance 1e-12.
pub fn spectral_summary<T: Scalar>(
    op: &AggregationOperator<T>,
    graph: &Graph,
) -> Result<SpectralSummary<T>> {
    ensure_connected(graph)?;
    let eigenvalues = symmetric_eigenvalues(&op.symmetric_similarity())?;
    let n = eigenvalues.len();
    let lambda1 = eigenvalues[n - 1];
    let lambda2 = if n >= 2 { eigenvalues[n - 2] } else { lambda1 };
    let stationary = stationary_distribution(op, graph, T::lit(1e-12), 500_000)?;
    Ok(SpectralSummary {
        lambda1,
        lambda2,
        spectral_gap: T::one() - lambda2,
        stationary: stationary.to_vec(),
        delta: op.residual_delta(),
    })
}

fn ensure_connected(graph: &Graph) -> Result<()> {
    let components = graph.component_count();
    if components > 1 {
        return Err(Error::Disconnected { components });
    }
    Ok(())
}

/// Explicit Kronecker square `M ⊗ M` acting on row-major vectorized kernels.
/// Brute-force oracle for tests; quadratic in memory, keep `n` small.
pub fn kronecker_square<T: Scalar>(op: &AggregationOperator<T>) -> Array2<T> {
    let n = op.node_count();
    let m = op.to_dense();
    let mut a = Array2::zeros((n * n, n * n));
    for u in 0..n {
        for up in 0..n {
            for v in 0..n {
                for vp in 0..n {
                    a[(u * n + up, v * n + vp)] = m[(u, v)] * m[(up, vp)];
                }
            }
        }
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{max_abs_diff, symmetry_defect};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn path3() -> Graph {
        Graph::from_edges(3, [(0, 1), (1, 2)]).unwrap()
    }

    fn triangle() -> Graph {
        Graph::from_edges(3, [(0, 1), (1, 2), (0, 2)]).unwrap()
    }

    #[test]
    fn path_rows_match_definition() {
        let op = build_operator::<f64>(&path3(), None).unwrap();
        let m = op.to_dense();
        let expected = array![
            [0.5, 0.5, 0.0],
            [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            [0.0, 0.5, 0.5]
        ];
        assert!(max_abs_diff(&m, &expected) < 1e-15);
    }

    #[test]
    fn triangle_rows_are_uniform() {
        let op = build_operator::<f64>(&triangle(), None).unwrap();
        let m = op.to_dense();
        for v in m.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn residual_row_is_convex_combination() {
        let op = build_operator::<f64>(&path3(), Some(0.5)).unwrap();
        let m = op.to_dense();
        assert!((m[(0, 0)] - 0.75).abs() < 1e-15);
        assert!((m[(0, 1)] - 0.25).abs() < 1e-15);
        assert!(m[(0, 2)].abs() < 1e-15);
    }

    #[test]
    fn delta_outside_open_interval_rejected() {
        assert!(build_operator::<f64>(&path3(), Some(0.0)).is_err());
        assert!(build_operator::<f64>(&path3(), Some(1.0)).is_err());
    }

    #[test]
    fn rows_sum_to_one_on_random_graph() {
        let (g, _) = crate::graph::generate_sbm(40, 0.3, 0.05, 2).unwrap();
        for delta in [None, Some(0.3)] {
            let op = build_operator::<f64>(&g, delta).unwrap();
            let m = op.to_dense();
            for u in 0..g.node_count() {
                let sum: f64 = m.row(u).sum();
                assert!((sum - 1.0).abs() < 1e-12, "row {u} sums to {sum}");
                assert!(m.row(u).iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn stationary_of_triangle_is_uniform() {
        let g = triangle();
        let op = build_operator::<f64>(&g, None).unwrap();
        let pi = stationary_distribution(&op, &g, 1e-12, 100_000).unwrap();
        for &x in pi.iter() {
            assert!((x - 1.0 / 3.0).abs() < 1e-10);
        }
    }

    #[test]
    fn stationary_of_path_matches_closed_form() {
        // Closed form (deg+1)/(2|E|+n): [2/7, 3/7, 2/7].
        let g = path3();
        let op = build_operator::<f64>(&g, None).unwrap();
        let pi = stationary_distribution(&op, &g, 1e-12, 100_000).unwrap();
        let closed = op.closed_form_stationary(&g);
        assert!((pi[0] - 2.0 / 7.0).abs() < 1e-10);
        assert!((pi[1] - 3.0 / 7.0).abs() < 1e-10);
        for (a, b) in pi.iter().zip(closed.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn residual_operator_shares_stationary() {
        let g = path3();
        let op = build_operator::<f64>(&g, Some(0.5)).unwrap();
        let pi = stationary_distribution(&op, &g, 1e-12, 100_000).unwrap();
        assert!((pi[0] - 2.0 / 7.0).abs() < 1e-10);
        assert!((pi[1] - 3.0 / 7.0).abs() < 1e-10);
    }

    #[test]
    fn detailed_balance_holds() {
        let (g, _) = crate::graph::generate_sbm(30, 0.4, 0.1, 5).unwrap();
        let op = build_operator::<f64>(&g, None).unwrap();
        let pi = op.closed_form_stationary(&g);
        let m = op.to_dense();
        for &(u, v) in g.edges() {
            let lhs = pi[u] * m[(u, v)];
            let rhs = pi[v] * m[(v, u)];
            assert!((lhs - rhs).abs() < 1e-15);
        }
    }

    #[test]
    fn disconnected_graph_reports_components() {
        let g = Graph::from_edges(4, [(0, 1), (2, 3)]).unwrap();
        let op = build_operator::<f64>(&g, None).unwrap();
        match stationary_distribution(&op, &g, 1e-12, 1000) {
            Err(Error::Disconnected { components }) => assert_eq!(components, 2),
            other => panic!("expected disconnected error, got {other:?}"),
        }
    }

    #[test]
    fn triangle_lambda2_is_zero() {
        // (1/3)·ones is rank one with spectrum {1, 0, 0}.
        let g = triangle();
        let op = build_operator::<f64>(&g, None).unwrap();
        let s = spectral_summary(&op, &g).unwrap();
        assert!((s.lambda1 - 1.0).abs() < 1e-10);
        assert!(s.lambda2.abs() < 1e-12);
    }

    #[test]
    fn lambda2_matches_dense_oracle_on_path() {
        let g = path3();
        let op = build_operator::<f64>(&g, None).unwrap();
        let s = spectral_summary(&op, &g).unwrap();
        let evals = symmetric_eigenvalues(&op.symmetric_similarity()).unwrap();
        assert!((s.lambda2 - evals[1]).abs() < 1e-10);
        // Characteristic polynomial oracle for this path: spectrum 1, 1/2, -1/6.
        assert!((s.lambda2 - 0.5).abs() < 1e-10);
        assert!((evals[0] + 1.0 / 6.0).abs() < 1e-10);
    }

    #[test]
    fn residual_lambda2_identity_on_grid() {
        let (g, _) = crate::graph::generate_sbm(24, 0.4, 0.1, 9).unwrap();
        assert!(g.is_connected());
        let base = spectral_summary(&build_operator::<f64>(&g, None).unwrap(), &g).unwrap();
        for k in 1..10 {
            let delta = k as f64 / 10.0;
            let res =
                spectral_summary(&build_operator::<f64>(&g, Some(delta)).unwrap(), &g).unwrap();
            let expected = (1.0 - delta) * base.lambda2 + delta;
            assert!(
                (res.lambda2 - expected).abs() < 1e-10,
                "delta={delta}: {} vs {}",
                res.lambda2,
                expected
            );
        }
    }

    #[test]
    fn apply_identity_on_triangle_gives_uniform() {
        let op = build_operator::<f64>(&triangle(), None).unwrap();
        let out = op.apply(&Array2::eye(3)).unwrap();
        for v in out.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_matrices_are_fixed_points() {
        let (g, _) = crate::graph::generate_sbm(20, 0.3, 0.1, 3).unwrap();
        let op = build_operator::<f64>(&g, None).unwrap();
        let c = Array2::from_elem((20, 20), 2.5);
        let out = op.apply(&c).unwrap();
        assert!(max_abs_diff(&out, &c) < 1e-12);
    }

    #[test]
    fn apply_matches_kronecker_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in 2..=8usize {
            let edges: Vec<(usize, usize)> = (0..n)
                .flat_map(|u| ((u + 1)..n).map(move |v| (u, v)))
                .filter(|_| rng.random::<f64>() < 0.6)
                .collect();
            let g = Graph::from_edges(n, edges).unwrap();
            for delta in [None, Some(0.4)] {
                let op = build_operator::<f64>(&g, delta).unwrap();
                let b = Array2::from_shape_fn((n, n), |_| rng.random::<f64>() - 0.5);
                let x = b.dot(&b.t()); // random PSD
                let fast = op.apply(&x).unwrap();
                // Kronecker route: reshape(A · vec(X)); the effective operator
                // (residual included) kroneckers the same way only without the
                // residual, so mix explicitly.
                let vec_x = Array1::from_iter(x.iter().copied());
                let a0 = kronecker_square(&build_operator::<f64>(&g, None).unwrap());
                let base = a0.dot(&vec_x);
                let mixed = match delta {
                    None => base,
                    Some(d) => Array1::from_iter(
                        base.iter()
                            .zip(vec_x.iter())
                            .map(|(&y, &x0)| (1.0 - d) * y + d * x0),
                    ),
                };
                let slow = Array2::from_shape_vec((n, n), mixed.to_vec()).unwrap();
                assert!(
                    max_abs_diff(&fast, &slow) < 1e-12,
                    "kronecker mismatch at n={n}, delta={delta:?}"
                );
            }
        }
    }

    #[test]
    fn apply_preserves_symmetry_and_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (g, _) = crate::graph::generate_sbm(16, 0.4, 0.1, 4).unwrap();
        let op = build_operator::<f64>(&g, Some(0.3)).unwrap();
        let b = Array2::from_shape_fn((16, 5), |_| rng.random::<f64>() - 0.5);
        let x = b.dot(&b.t());
        let y = op.apply(&x).unwrap();
        assert_eq!(symmetry_defect(&y), 0.0);
        let min_eig = symmetric_eigenvalues(&y).unwrap()[0];
        assert!(min_eig > -1e-10);
    }

    #[test]
    fn transpose_multiply_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (g, _) = crate::graph::generate_sbm(12, 0.4, 0.1, 6).unwrap();
        let op = build_operator::<f64>(&g, Some(0.2)).unwrap();
        let x = Array2::from_shape_fn((12, 3), |_| rng.random::<f64>() - 0.5);
        let y = Array2::from_shape_fn((12, 3), |_| rng.random::<f64>() - 0.5);
        // <Mx, y> == <x, Mᵀy>
        let lhs = (op.left_multiply(&x).unwrap() * &y).sum();
        let rhs = (&x * &op.left_multiply_transpose(&y).unwrap()).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
