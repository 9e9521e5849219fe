//! Exact infinite-width kernel recursion for graph convolutional networks:
//! the covariance kernel Σ and tangent kernel Θ evolved through L propagation
//! units, each one aggregation followed by R nonlinear transformations, in
//! vanilla and residual variants.
//!
//! Aggregation acts as the congruence `M X Mᵀ` (see [`crate::operator`]);
//! a transformation replaces every entry by the dual-activation expectations
//! of [`crate::activation`]:
//!
//! - vanilla:       `Σ ← E_φφ`,      `Θ ← Θ⊙Σ̇ + Σ`
//! - residual MLP:  `Σ ← Σ + E_φφ`,  `Θ ← Θ⊙(Σ̇+1) + Σ`
//!
//! with `Σ̇ = E_φ'φ'` evaluated on the pre-transform covariance.

use crate::activation::{relu_correlation_map, Activation, DualKernel};
use crate::data::FeatureMatrix;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::operator::{build_operator, AggregationOperator};
use crate::scalar::Scalar;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

/// Dense kernels above this size need `allow_large` (a Pubmed-scale dense
/// kernel is multi-gigabyte).
pub const LARGE_KERNEL_GUARD: usize = 8192;

/// Everything that determines a kernel run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GntkConfig<T> {
    pub activation: Activation,
    pub sigma_w_sq: T,
    pub sigma_b_sq: T,
    /// Nonlinear transformations per propagation unit (R >= 1).
    pub transforms_per_unit: usize,
    /// Number of propagation units (L >= 0).
    pub units: usize,
    /// Residual aggregation weight δ in (0,1): kernel update
    /// `(1-δ)·MXMᵀ + δ·X`.
    pub residual_aggregation: Option<T>,
    /// Residual connections between transformations.
    pub residual_mlp: bool,
    /// Gauss-Hermite order for tanh expectations (ignored for relu).
    pub quadrature_order: usize,
    /// Record per-depth normalized kernel statistics.
    pub record_trace: bool,
    /// Override the dense-kernel size guard.
    pub allow_large: bool,
}

impl<T: Scalar> GntkConfig<T> {
    /// ReLU at the edge of chaos (`σ²_w = 2`, `σ²_b = 0`).
    pub fn relu_eoc(transforms_per_unit: usize, units: usize) -> Self {
        GntkConfig {
            activation: Activation::Relu,
            sigma_w_sq: T::lit(2.0),
            sigma_b_sq: T::zero(),
            transforms_per_unit,
            units,
            residual_aggregation: None,
            residual_mlp: false,
            quadrature_order: 60,
            record_trace: false,
            allow_large: false,
        }
    }

    pub fn tanh(transforms_per_unit: usize, units: usize, sigma_w_sq: T, sigma_b_sq: T) -> Self {
        GntkConfig {
            activation: Activation::Tanh,
            sigma_w_sq,
            sigma_b_sq,
            transforms_per_unit,
            units,
            residual_aggregation: None,
            residual_mlp: false,
            quadrature_order: 60,
            record_trace: false,
            allow_large: false,
        }
    }

    pub fn with_residual_aggregation(mut self, delta: T) -> Self {
        self.residual_aggregation = Some(delta);
        self
    }

    pub fn with_residual_mlp(mut self) -> Self {
        self.residual_mlp = true;
        self
    }

    pub fn with_trace(mut self) -> Self {
        self.record_trace = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.transforms_per_unit == 0 {
            return Err(Error::InvalidParameter(
                "transforms_per_unit must be >= 1".into(),
            ));
        }
        if let Some(d) = self.residual_aggregation {
            if d <= T::zero() || d >= T::one() {
                return Err(Error::InvalidParameter(format!(
                    "residual aggregation delta must lie in (0,1), got {d}"
                )));
            }
        }
        // Scale validation is shared with the dual-activation constructor.
        self.dual_kernel().map(|_| ())
    }

    pub fn dual_kernel(&self) -> Result<DualKernel<T>> {
        DualKernel::new(
            self.activation,
            self.sigma_w_sq,
            self.sigma_b_sq,
            self.quadrature_order,
        )
    }
}

/// The pair (Σ, Θ) with bookkeeping, at unit `l` after `r` transformations.
#[derive(Debug, Clone)]
pub struct KernelState<T> {
    pub sigma: Array2<T>,
    pub theta: Array2<T>,
    /// Derivative kernel Σ̇ of the most recent transformation (zeros before
    /// the first one).
    pub sigma_dot: Array2<T>,
    /// Completed aggregation steps (the propagation-unit index l).
    pub unit_index: usize,
    /// Completed transformations within the current unit (the layer index r).
    pub layer_index: usize,
    /// Correlations nudged back into [-1, 1] so far.
    pub clamp_events: u64,
}

impl<T: Scalar> KernelState<T> {
    pub fn node_count(&self) -> usize {
        self.sigma.nrows()
    }

    /// Total transformations applied so far; the depth axis of the
    /// convergence plots (`R·l + r` with states labeled by completed units).
    pub fn depth(&self, transforms_per_unit: usize) -> usize {
        if self.unit_index == 0 {
            0
        } else {
            transforms_per_unit * (self.unit_index - 1) + self.layer_index
        }
    }
}

/// `Σ = Θ = H Hᵀ` at `l = r = 0`.
pub fn init_state<T: Scalar>(features: &FeatureMatrix<T>) -> Result<KernelState<T>> {
    let gram = features.gram();
    let n = gram.nrows();
    Ok(KernelState {
        sigma: gram.clone(),
        theta: gram,
        sigma_dot: Array2::zeros((n, n)),
        unit_index: 0,
        layer_index: 0,
        clamp_events: 0,
    })
}

/// One aggregation step: `Σ ← op(Σ)`, `Θ ← op(Θ)`; advances the unit index
/// and resets the layer index. Valid only at the start or after a full block
/// of transformations.
pub fn aggregate_step<T: Scalar>(
    mut state: KernelState<T>,
    op: &AggregationOperator<T>,
    transforms_per_unit: usize,
) -> Result<KernelState<T>> {
    let at_start = state.unit_index == 0 && state.layer_index == 0;
    if !at_start && state.layer_index != transforms_per_unit {
        return Err(Error::InvalidParameter(format!(
            "aggregate_step at layer {} of {} transformations",
            state.layer_index, transforms_per_unit
        )));
    }
    if op.node_count() != state.node_count() {
        return Err(Error::Dimension(format!(
            "operator is {}x{} but state is {}x{}",
            op.node_count(),
            op.node_count(),
            state.node_count(),
            state.node_count()
        )));
    }
    state.sigma = op.apply(&state.sigma)?;
    state.theta = op.apply(&state.theta)?;
    state.unit_index += 1;
    state.layer_index = 0;
    Ok(state)
}

/// Correlations are clamped into the open interval before arcsin/sqrt to
/// avoid domain faults from accumulated rounding; anything further out than
/// the tolerance signals upstream corruption.
const CLAMP_MARGIN: f64 = 1e-15;
const CLAMP_TOLERANCE: f64 = 1e-10;

/// One nonlinear transformation step over all node pairs.
pub fn transform_step<T: Scalar>(
    mut state: KernelState<T>,
    dual: &DualKernel<T>,
    residual_mlp: bool,
) -> Result<KernelState<T>> {
    let n = state.node_count();
    let margin = T::lit(CLAMP_MARGIN);
    let lo = -T::one() + margin;
    let hi = T::one() - margin;
    let tol = T::one() + T::lit(CLAMP_TOLERANCE);
    let clamp_counter = AtomicU64::new(0);

    // Diagonal variances first; both the diagonal results and every
    // off-diagonal entry read them.
    let diag: Vec<T> = (0..n).map(|u| state.sigma[(u, u)]).collect();
    for (u, &q) in diag.iter().enumerate() {
        if q <= T::zero() {
            return Err(Error::Numerical(format!(
                "non-positive variance {q} at node {u} entering transformation"
            )));
        }
    }

    let sigma = &state.sigma;
    // Upper-triangle rows in parallel: (sigma_new, sigma_dot_new) per entry.
    let rows: Vec<Vec<(T, T)>> = (0..n)
        .into_par_iter()
        .map(|u| -> Result<Vec<(T, T)>> {
            let q_u = diag[u];
            let mut out = Vec::with_capacity(n - u);
            for v in u..n {
                let (e_phi, e_dphi) = if v == u {
                    let r = dual.eval(q_u, q_u, q_u)?;
                    (r.e_phi_phi, r.e_dphi_dphi)
                } else {
                    let q_v = diag[v];
                    let scale = (q_u * q_v).sqrt();
                    let c_raw = sigma[(u, v)] / scale;
                    if c_raw.abs() > tol {
                        return Err(Error::Numerical(format!(
                            "correlation {c_raw} at pair ({u}, {v}) outside [-1, 1] beyond \
                             clamp tolerance"
                        )));
                    }
                    let c = c_raw.min(hi).max(lo);
                    if c != c_raw {
                        clamp_counter.fetch_add(1, Ordering::Relaxed);
                    }
                    let r = dual.eval(q_u, q_v, c * scale)?;
                    (r.e_phi_phi, r.e_dphi_dphi)
                };
                out.push((e_phi, e_dphi));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut sigma_new = Array2::zeros((n, n));
    let mut sigma_dot_new = Array2::zeros((n, n));
    for (u, row) in rows.into_iter().enumerate() {
        for (offset, (e_phi, e_dphi)) in row.into_iter().enumerate() {
            let v = u + offset;
            sigma_new[(u, v)] = e_phi;
            sigma_new[(v, u)] = e_phi;
            sigma_dot_new[(u, v)] = e_dphi;
            sigma_dot_new[(v, u)] = e_dphi;
        }
    }

    if residual_mlp {
        sigma_new += &state.sigma;
        let mut theta = state.theta;
        theta.zip_mut_with(&sigma_dot_new, |t, &d| *t = *t * (d + T::one()));
        theta += &sigma_new;
        state.theta = theta;
    } else {
        let mut theta = state.theta;
        theta.zip_mut_with(&sigma_dot_new, |t, &d| *t = *t * d);
        theta += &sigma_new;
        state.theta = theta;
    }
    state.sigma = sigma_new;
    state.sigma_dot = sigma_dot_new;
    state.layer_index += 1;
    state.clamp_events += clamp_counter.into_inner();
    Ok(state)
}

/// Per-depth statistics of a diagonally normalized kernel.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MatrixStats<T> {
    pub min: T,
    pub max: T,
    pub mean: T,
    /// `max - min`, the element-wise distance that decays exponentially
    /// with depth on connected graphs.
    pub spread: T,
}

/// Statistics of `X / gm(diag X)`, the kernel divided by the geometric mean
/// of its diagonal (computed through logarithms so that residual-MLP growth
/// like 2^depth cannot overflow).
pub fn normalized_stats<T: Scalar>(matrix: &Array2<T>) -> MatrixStats<T> {
    let n = matrix.nrows();
    let mut log_sum = T::zero();
    let mut positive = 0usize;
    for u in 0..n {
        let d = matrix[(u, u)];
        if d > T::zero() {
            log_sum += d.ln();
            positive += 1;
        }
    }
    let gm = if positive > 0 {
        (log_sum / T::from_count(positive)).exp()
    } else {
        T::one()
    };
    let mut min = T::infinity();
    let mut max = T::neg_infinity();
    let mut sum = T::zero();
    for &x in matrix.iter() {
        let y = x / gm;
        min = min.min(y);
        max = max.max(y);
        sum += y;
    }
    MatrixStats {
        min,
        max,
        mean: sum / T::from_count(n * n),
        spread: max - min,
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TraceSample<T> {
    /// Depth index: transformations applied so far.
    pub depth: usize,
    pub theta: MatrixStats<T>,
    pub sigma: MatrixStats<T>,
}

/// Output of a full kernel run.
#[derive(Debug, Clone)]
pub struct KernelRun<T> {
    pub theta: Array2<T>,
    pub sigma: Array2<T>,
    pub trace: Option<Vec<TraceSample<T>>>,
    pub clamp_events: u64,
    /// Final depth `R·L`.
    pub depth: usize,
}

/// Compute `Θ^{(L)}_{(R)}`: init, then for each unit one aggregation followed
/// by R transformations.
pub fn compute_gntk<T: Scalar>(
    graph: &Graph,
    features: &FeatureMatrix<T>,
    config: &GntkConfig<T>,
) -> Result<KernelRun<T>> {
    let (run, _) = compute_gntk_with_snapshots(graph, features, config, &[])?;
    Ok(run)
}

/// Same as [`compute_gntk`], additionally snapshotting Θ after each unit
/// index listed in `snapshot_units` (0 = the initial gram matrix).
pub fn compute_gntk_with_snapshots<T: Scalar>(
    graph: &Graph,
    features: &FeatureMatrix<T>,
    config: &GntkConfig<T>,
    snapshot_units: &[usize],
) -> Result<(KernelRun<T>, Vec<(usize, Array2<T>)>)> {
    config.validate()?;
    let n = graph.node_count();
    if n > LARGE_KERNEL_GUARD && !config.allow_large {
        return Err(Error::InvalidParameter(format!(
            "dense kernel for {n} nodes exceeds the {LARGE_KERNEL_GUARD}-node guard; \
             set allow_large to override"
        )));
    }
    if features.node_count() != n {
        return Err(Error::Dimension(format!(
            "features have {} rows but graph has {} nodes",
            features.node_count(),
            n
        )));
    }
    let op = build_operator(graph, config.residual_aggregation)?;
    let dual = config.dual_kernel()?;
    let mut state = init_state(features)?;
    let mut trace = config.record_trace.then(Vec::new);
    let mut snapshots = Vec::new();
    let record = |state: &KernelState<T>, trace: &mut Option<Vec<TraceSample<T>>>| {
        if let Some(samples) = trace.as_mut() {
            samples.push(TraceSample {
                depth: state.depth(config.transforms_per_unit),
                theta: normalized_stats(&state.theta),
                sigma: normalized_stats(&state.sigma),
            });
        }
    };
    record(&state, &mut trace);
    if snapshot_units.contains(&0) {
        snapshots.push((0, state.theta.clone()));
    }
    for unit in 1..=config.units {
        state = aggregate_step(state, &op, config.transforms_per_unit)?;
        for _ in 0..config.transforms_per_unit {
            state = transform_step(state, &dual, config.residual_mlp)?;
            record(&state, &mut trace);
        }
        if snapshot_units.contains(&unit) {
            snapshots.push((unit, state.theta.clone()));
        }
    }
    Ok((
        KernelRun {
            depth: state.depth(config.transforms_per_unit),
            clamp_events: state.clamp_events,
            trace,
            sigma: state.sigma,
            theta: state.theta,
        },
        snapshots,
    ))
}

/// Pure-MLP correlation trajectory at a solved edge-of-chaos point: iterates
/// `C_{r+1} = f(C_r)` with no aggregation and returns `[c0, c1, ..]` with
/// `steps + 1` entries.
pub fn mlp_correlation_trace<T: Scalar>(
    c0: T,
    steps: usize,
    activation: Activation,
    sigma_b_sq: T,
    quadrature_order: usize,
) -> Result<Vec<T>> {
    if !(-T::one()..T::one()).contains(&c0) {
        return Err(Error::InvalidParameter(format!(
            "initial correlation must lie in [-1, 1), got {c0}"
        )));
    }
    let mut trace = Vec::with_capacity(steps + 1);
    trace.push(c0);
    match activation {
        Activation::Relu => {
            let mut c = c0;
            for _ in 0..steps {
                c = relu_correlation_map(c);
                trace.push(c);
            }
        }
        Activation::Tanh => {
            let eoc = crate::activation::edge_of_chaos_solve(activation, sigma_b_sq)?;
            if eoc.degenerate {
                return Err(Error::InvalidParameter(
                    "tanh edge of chaos is degenerate at sigma_b_sq = 0 (q* = 0); \
                     use a positive bias variance"
                        .into(),
                ));
            }
            let dual = DualKernel::new(
                Activation::Tanh,
                eoc.sigma_w_sq,
                sigma_b_sq,
                quadrature_order,
            )?;
            let q = eoc.q_star;
            let mut c = c0;
            for _ in 0..steps {
                let r = dual.eval(q, q, c * q)?;
                c = (r.e_phi_phi / q).min(T::one()).max(-T::one());
                trace.push(c);
            }
        }
    }
    Ok(trace)
}
