//! Finite-width GCN with hand-written forward/backward passes, an exact
//! empirical NTK estimator, and a full-batch gradient-descent training
//! harness with optional edge sampling.
//!
//! Architecture: a linear feature embedding `H⁰ = X W₀ᵀ` (unit prefactor,
//! no bias, no activation — features enter linearly, matching the kernel
//! base case `Σ⁰ = Θ⁰ = HHᵀ`), then L units of one aggregation followed by
//! R NTK-parameterized layers `h ← (σ_w/√m_in)·W φ(h) + σ_b b`.
//!
//! The empirical NTK `Θ̂(u,u') = (1/m)Σᵢ ∇_θ h_i(u)·∇_θ h_i(u')` over all m
//! coordinates of the final pre-activation is computed exactly by walking
//! the network top-down while keeping the output Jacobian blocks
//! `D(u,v) = ∂h(u)/∂z(v)` in factored form for as long as the algebra
//! allows (identity, per-output-row scaled, column scaled), densifying only
//! for parameters more than two transformations below the output.

use crate::activation::Activation;
use crate::data::{argmax_rows, DatasetSplit, FeatureMatrix, LabelVector};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::sampling::{sample_edges_seeded, SampleConfig};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Aggregation used by the finite-width network. The kernel theory uses mean
/// aggregation over the closed neighborhood; the symmetric-normalized form
/// mirrors the standard GCN backbone and is offered for training runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationKind {
    MeanWithSelf,
    SymmetricNormalized,
}

/// Sparse propagation matrix with row and column access.
#[derive(Debug, Clone)]
pub struct PropagationMatrix<T> {
    n: usize,
    rows: Vec<Vec<(usize, T)>>,
    cols: Vec<Vec<(usize, T)>>,
}

impl<T: Scalar> PropagationMatrix<T> {
    pub fn build(graph: &Graph, kind: AggregationKind) -> Self {
        let n = graph.node_count();
        let mut rows: Vec<Vec<(usize, T)>> = vec![Vec::new(); n];
        for u in 0..n {
            let du = T::from_count(graph.degree(u) + 1);
            let mut push = |v: usize| {
                let w = match kind {
                    AggregationKind::MeanWithSelf => T::one() / du,
                    AggregationKind::SymmetricNormalized => {
                        let dv = T::from_count(graph.degree(v) + 1);
                        T::one() / (du * dv).sqrt()
                    }
                };
                rows[u].push((v, w));
            };
            let mut pushed_self = false;
            for &v in graph.neighbors(u) {
                if !pushed_self && v > u {
                    push(u);
                    pushed_self = true;
                }
                push(v);
            }
            if !pushed_self {
                push(u);
            }
        }
        let mut cols: Vec<Vec<(usize, T)>> = vec![Vec::new(); n];
        for (u, row) in rows.iter().enumerate() {
            for &(v, w) in row {
                cols[v].push((u, w));
            }
        }
        PropagationMatrix { n, rows, cols }
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    /// `M X`.
    pub fn left_multiply(&self, x: &Array2<T>) -> Array2<T> {
        let cols = x.ncols();
        let mut out = Array2::zeros((self.n, cols));
        for (u, row) in self.rows.iter().enumerate() {
            for &(v, w) in row {
                let src = x.row(v);
                for c in 0..cols {
                    out[(u, c)] += w * src[c];
                }
            }
        }
        out
    }

    /// `Mᵀ X`.
    pub fn left_multiply_transpose(&self, x: &Array2<T>) -> Array2<T> {
        let cols = x.ncols();
        let mut out = Array2::zeros((self.n, cols));
        for (v, col) in self.cols.iter().enumerate() {
            for &(u, w) in col {
                let src = x.row(u);
                for c in 0..cols {
                    out[(v, c)] += w * src[c];
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<T> {
        let mut m = Array2::zeros((self.n, self.n));
        for (u, row) in self.rows.iter().enumerate() {
            for &(v, w) in row {
                m[(u, v)] = w;
            }
        }
        m
    }

    fn column(&self, v: usize) -> &[(usize, T)] {
        &self.cols[v]
    }
}

/// Finite-width architecture and scales.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GcnConfig<T> {
    /// Propagation units L (the network depth in aggregation steps).
    pub units: usize,
    /// Nonlinear layers per unit R.
    pub transforms_per_unit: usize,
    pub activation: Activation,
    pub sigma_w_sq: T,
    pub sigma_b_sq: T,
    pub aggregation: AggregationKind,
    /// Override the width guard (widths beyond 4096 are desk-scale hostile).
    pub allow_wide: bool,
}

impl<T: Scalar> GcnConfig<T> {
    pub fn relu_eoc(units: usize, transforms_per_unit: usize) -> Self {
        GcnConfig {
            units,
            transforms_per_unit,
            activation: Activation::Relu,
            sigma_w_sq: T::lit(2.0),
            sigma_b_sq: T::zero(),
            aggregation: AggregationKind::MeanWithSelf,
            allow_wide: false,
        }
    }

    pub fn tanh(units: usize, transforms_per_unit: usize, sigma_w_sq: T, sigma_b_sq: T) -> Self {
        GcnConfig {
            units,
            transforms_per_unit,
            activation: Activation::Tanh,
            sigma_w_sq,
            sigma_b_sq,
            aggregation: AggregationKind::MeanWithSelf,
            allow_wide: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.units == 0 || self.transforms_per_unit == 0 {
            return Err(Error::InvalidParameter(
                "network needs at least one unit and one transformation".into(),
            ));
        }
        if self.sigma_w_sq <= T::zero() || self.sigma_b_sq < T::zero() {
            return Err(Error::InvalidParameter(
                "sigma_w_sq must be positive and sigma_b_sq nonnegative".into(),
            ));
        }
        Ok(())
    }

    fn layer_count(&self) -> usize {
        self.units * self.transforms_per_unit
    }
}

pub const WIDTH_GUARD: usize = 4096;

/// All trainable parameters. Entries are standard normal draws; the scale
/// multipliers `σ_w/√m_in` and `σ_b` are applied in the forward pass.
#[derive(Debug, Clone)]
pub struct GcnParams<T> {
    /// Linear feature embedding, `width × d`.
    pub embed: Array2<T>,
    /// Transform weights in `(l, r)` order, each `m_out × m_in`.
    pub weights: Vec<Array2<T>>,
    /// Transform biases, each `m_out`.
    pub biases: Vec<Array1<T>>,
    pub width: usize,
    /// `Some(k)`: the final layer is a k-class readout; `None`: the output
    /// keeps the full width (the empirical-NTK convention).
    pub output_dim: Option<usize>,
}

impl<T: Scalar> GcnParams<T> {
    pub fn init(
        config: &GcnConfig<T>,
        feature_dim: usize,
        width: usize,
        output_dim: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if width < 2 {
            return Err(Error::InvalidParameter(format!("width {width} too small")));
        }
        if width > WIDTH_GUARD && !config.allow_wide {
            return Err(Error::InvalidParameter(format!(
                "width {width} exceeds the {WIDTH_GUARD} guard; set allow_wide to override"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |shape: (usize, usize)| {
            Array2::from_shape_simple_fn(shape, || {
                T::lit(<StandardNormal as Distribution<f64>>::sample(
                    &StandardNormal,
                    &mut rng,
                ))
            })
        };
        let embed = normal((width, feature_dim));
        let layers = config.layer_count();
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for layer in 0..layers {
            let m_out = if layer + 1 == layers {
                output_dim.unwrap_or(width)
            } else {
                width
            };
            weights.push(normal((m_out, width)));
            biases.push(
                normal((m_out, 1))
                    .column(0)
                    .to_owned(),
            );
        }
        Ok(GcnParams {
            embed,
            weights,
            biases,
            width,
            output_dim,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.embed.len()
            + self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }
}

/// Forward pass caches: everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// Final pre-activation output, `n × m_out`.
    pub output: Array2<T>,
    /// Inputs to φ at each transform layer (the aggregated or previous
    /// pre-activation), in forward order.
    phi_inputs: Vec<Array2<T>>,
}

/// Forward pass: embedding, then per unit one aggregation and R transforms.
pub fn forward<T: Scalar>(
    op: &PropagationMatrix<T>,
    features: &FeatureMatrix<T>,
    params: &GcnParams<T>,
    config: &GcnConfig<T>,
) -> Result<ForwardCache<T>> {
    config.validate()?;
    if features.node_count() != op.node_count() {
        return Err(Error::Dimension(format!(
            "features have {} rows but operator has {} nodes",
            features.node_count(),
            op.node_count()
        )));
    }
    if features.dim() != params.embed.ncols() {
        return Err(Error::Dimension(format!(
            "feature dim {} does not match embedding dim {}",
            features.dim(),
            params.embed.ncols()
        )));
    }
    let layers = config.layer_count();
    if params.weights.len() != layers {
        return Err(Error::Dimension(format!(
            "params carry {} layers but config wants {layers}",
            params.weights.len()
        )));
    }
    let sigma_w = config.sigma_w_sq.sqrt();
    let sigma_b = config.sigma_b_sq.sqrt();
    let mut h = features.values().dot(&params.embed.t());
    let mut phi_inputs = Vec::with_capacity(layers);
    let mut layer = 0;
    for _ in 0..config.units {
        h = op.left_multiply(&h);
        for _ in 0..config.transforms_per_unit {
            let w = &params.weights[layer];
            let b = &params.biases[layer];
            let m_in = w.ncols();
            let rho = sigma_w / T::from_count(m_in).sqrt();
            let phi = h.mapv(|x| config.activation.apply(x));
            let mut next = phi.dot(&w.t());
            next.mapv_inplace(|x| x * rho);
            for mut row in next.rows_mut() {
                for (c, x) in row.iter_mut().enumerate() {
                    *x += sigma_b * b[c];
                }
            }
            phi_inputs.push(h);
            h = next;
            layer += 1;
        }
    }
    Ok(ForwardCache {
        output: h,
        phi_inputs,
    })
}

/// Parameter gradients of a scalar function of the output.
#[derive(Debug, Clone)]
pub struct GcnGrads<T> {
    pub embed: Array2<T>,
    pub weights: Vec<Array2<T>>,
    pub biases: Vec<Array1<T>>,
}

/// Manual backward pass for `d(scalar)/d(output) = grad_output`.
pub fn backward<T: Scalar>(
    op: &PropagationMatrix<T>,
    features: &FeatureMatrix<T>,
    params: &GcnParams<T>,
    config: &GcnConfig<T>,
    cache: &ForwardCache<T>,
    grad_output: &Array2<T>,
) -> Result<GcnGrads<T>> {
    let layers = config.layer_count();
    let sigma_w = config.sigma_w_sq.sqrt();
    let sigma_b = config.sigma_b_sq.sqrt();
    let mut g = grad_output.clone();
    let mut weight_grads: Vec<Array2<T>> = Vec::with_capacity(layers);
    let mut bias_grads: Vec<Array1<T>> = Vec::with_capacity(layers);
    let mut layer = layers;
    for _ in 0..config.units {
        for _ in 0..config.transforms_per_unit {
            layer -= 1;
            let w = &params.weights[layer];
            let a = &cache.phi_inputs[layer];
            let m_in = w.ncols();
            let rho = sigma_w / T::from_count(m_in).sqrt();
            let phi = a.mapv(|x| config.activation.apply(x));
            let mut gw = g.t().dot(&phi);
            gw.mapv_inplace(|x| x * rho);
            let gb = g
                .t()
                .rows()
                .into_iter()
                .map(|row| sigma_b * row.sum())
                .collect::<Array1<T>>();
            let mut ga = g.dot(w);
            ga.mapv_inplace(|x| x * rho);
            ga.zip_mut_with(a, |x, &ai| *x = *x * config.activation.derivative(ai));
            weight_grads.push(gw);
            bias_grads.push(gb);
            g = ga;
        }
        g = op.left_multiply_transpose(&g);
    }
    weight_grads.reverse();
    bias_grads.reverse();
    let embed_grad = g.t().dot(features.values());
    Ok(GcnGrads {
        embed: embed_grad,
        weights: weight_grads,
        biases: bias_grads,
    })
}

/// Verify the manual backward pass against central finite differences on a
/// random subset of at least `min_params` parameters (h = 1e-5). ReLU
/// parameters whose perturbation flips any activation sign pattern are
/// skipped (the kink makes the derivative one-sided there). Returns the
/// worst error `|analytic - numeric| / max(|analytic|, |numeric|, 1)`.
pub fn grad_check<T: Scalar>(
    graph: &Graph,
    features: &FeatureMatrix<T>,
    params: &GcnParams<T>,
    config: &GcnConfig<T>,
    min_params: usize,
    probe_seed: u64,
) -> Result<T> {
    let op = PropagationMatrix::build(graph, config.aggregation);
    let cache = forward(&op, features, params, config)?;
    let (n, m_out) = cache.output.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
    let probe = Array2::from_shape_simple_fn((n, m_out), || {
        T::lit(<StandardNormal as Distribution<f64>>::sample(
            &StandardNormal,
            &mut rng,
        ))
    });
    let grads = backward(&op, features, params, config, &cache, &probe)?;
    let scalar_of = |p: &GcnParams<T>| -> Result<T> {
        let c = forward(&op, features, p, config)?;
        Ok((&c.output * &probe).sum())
    };
    let masks_of = |p: &GcnParams<T>| -> Result<Vec<bool>> {
        let c = forward(&op, features, p, config)?;
        Ok(c.phi_inputs
            .iter()
            .flat_map(|a| a.iter().map(|&x| x > T::zero()))
            .collect())
    };

    // Enumerate parameter coordinates: (block, index) with block 0 = embed,
    // 1 + 2k = weight k, 2 + 2k = bias k.
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for i in 0..params.embed.len() {
        coords.push((0, i));
    }
    for (k, w) in params.weights.iter().enumerate() {
        for i in 0..w.len() {
            coords.push((1 + 2 * k, i));
        }
    }
    for (k, b) in params.biases.iter().enumerate() {
        for i in 0..b.len() {
            coords.push((2 + 2 * k, i));
        }
    }
    use rand::seq::SliceRandom;
    coords.shuffle(&mut rng);
    let take = coords.len().min(min_params.max(200));
    let h = T::lit(1e-5);
    let mut worst = T::zero();
    let mut checked = 0usize;
    for &(block, index) in coords.iter() {
        if checked >= take {
            break;
        }
        let mut plus = params.clone();
        let mut minus = params.clone();
        {
            let (p, m) = (&mut plus, &mut minus);
            let bump = |prm: &mut GcnParams<T>, delta: T| {
                if block == 0 {
                    let v = prm.embed.as_slice_mut().expect("contiguous");
                    v[index] += delta;
                } else if block % 2 == 1 {
                    let v = prm.weights[(block - 1) / 2].as_slice_mut().expect("contiguous");
                    v[index] += delta;
                } else {
                    let v = &mut prm.biases[(block - 2) / 2];
                    v[index] += delta;
                }
            };
            bump(p, h);
            bump(m, -h);
        }
        if config.activation == Activation::Relu && masks_of(&plus)? != masks_of(&minus)? {
            continue; // too close to a kink for a two-sided difference
        }
        let numeric = (scalar_of(&plus)? - scalar_of(&minus)?) / (T::lit(2.0) * h);
        let analytic = if block == 0 {
            grads.embed.as_slice().expect("contiguous")[index]
        } else if block % 2 == 1 {
            grads.weights[(block - 1) / 2].as_slice().expect("contiguous")[index]
        } else {
            grads.biases[(block - 2) / 2][index]
        };
        let denom = analytic.abs().max(numeric.abs()).max(T::one());
        worst = worst.max((analytic - numeric).abs() / denom);
        checked += 1;
    }
    if checked == 0 {
        return Err(Error::Numerical("no checkable parameters".into()));
    }
    Ok(worst)
}

/// Monte-Carlo estimate of the NTK from finite-width networks.
#[derive(Debug, Clone)]
pub struct EmpiricalNtk<T> {
    pub matrix: Array2<T>,
    pub width: usize,
    pub num_inits: usize,
}

/// Output Jacobian blocks `D(u,v) = ∂h(u)/∂z(v)` in progressively less
/// structured form as the walk descends.
enum Chain<T> {
    /// `D(u,v) = δ_uv · I`.
    Delta,
    /// `D(u,v) = s[u,v] · B_u`.
    RowScaled {
        s: Array2<T>,
        blocks: Vec<Array2<T>>,
    },
    /// `D(u,v) = B_u · diag(g[u][v, :])`.
    ColScaled {
        blocks: Vec<Array2<T>>,
        g: Vec<Array2<T>>,
    },
    /// Explicit blocks, `blocks[u][v]`.
    Dense { blocks: Vec<Vec<Array2<T>>> },
}

impl<T: Scalar> Chain<T> {
    /// `C(u,u') = (1/m) Σ_{v,v'} G[v,v'] · <D(u,v), D(u',v')>_F`.
    fn contract(&self, gram: &Array2<T>, n: usize, m_final: usize) -> Array2<T> {
        let inv_m = T::one() / T::from_count(m_final);
        match self {
            Chain::Delta => gram.clone(),
            Chain::RowScaled { s, blocks } => {
                let mut beta = Array2::zeros((n, n));
                for u in 0..n {
                    for v in u..n {
                        let dot = (&blocks[u] * &blocks[v]).sum() * inv_m;
                        beta[(u, v)] = dot;
                        beta[(v, u)] = dot;
                    }
                }
                let mixed = s.dot(gram).dot(&s.t());
                &beta * &mixed
            }
            Chain::ColScaled { blocks, g } => {
                let m_in = blocks[0].ncols();
                // h[u'] = G · g[u']  and column-pair grams of the blocks.
                let h: Vec<Array2<T>> = (0..n).map(|u| gram.dot(&g[u])).collect();
                let mut out = Array2::zeros((n, n));
                for u in 0..n {
                    for up in u..n {
                        let mut col_pair = vec![T::zero(); m_in];
                        for k in 0..blocks[u].nrows() {
                            for c in 0..m_in {
                                col_pair[c] += blocks[u][(k, c)] * blocks[up][(k, c)];
                            }
                        }
                        let mut acc = T::zero();
                        for c in 0..m_in {
                            let mut t = T::zero();
                            for v in 0..n {
                                t += g[u][(v, c)] * h[up][(v, c)];
                            }
                            acc += col_pair[c] * t;
                        }
                        let val = acc * inv_m;
                        out[(u, up)] = val;
                        out[(up, u)] = val;
                    }
                }
                out
            }
            Chain::Dense { blocks } => {
                let mut out = Array2::zeros((n, n));
                for u in 0..n {
                    for up in u..n {
                        let mut acc = T::zero();
                        for v in 0..n {
                            for vp in 0..n {
                                let gvv = gram[(v, vp)];
                                if gvv == T::zero() {
                                    continue;
                                }
                                acc += gvv * (&blocks[u][v] * &blocks[up][vp]).sum();
                            }
                        }
                        let val = acc * inv_m;
                        out[(u, up)] = val;
                        out[(up, u)] = val;
                    }
                }
                out
            }
        }
    }

    /// Descend through a transform layer: `D ← D · (ρW) · diag(mask[v, :])`.
    fn descend_transform(
        self,
        w: &Array2<T>,
        rho: T,
        mask: &Array2<T>,
        n: usize,
        dense_limit: usize,
    ) -> Result<Chain<T>> {
        let scaled_w = w.mapv(|x| x * rho);
        match self {
            Chain::Delta => {
                let blocks = (0..n)
                    .map(|u| {
                        let mut b = scaled_w.clone();
                        for mut row in b.rows_mut() {
                            for (c, x) in row.iter_mut().enumerate() {
                                *x = *x * mask[(u, c)];
                            }
                        }
                        b
                    })
                    .collect();
                Ok(Chain::RowScaled {
                    s: Array2::eye(n),
                    blocks,
                })
            }
            Chain::RowScaled { s, blocks } => {
                let new_blocks: Vec<Array2<T>> =
                    blocks.par_iter().map(|b| b.dot(&scaled_w)).collect();
                let m_in = scaled_w.ncols();
                let g = (0..n)
                    .map(|u| {
                        let mut gu = Array2::zeros((n, m_in));
                        for v in 0..n {
                            let suv = s[(u, v)];
                            if suv == T::zero() {
                                continue;
                            }
                            for c in 0..m_in {
                                gu[(v, c)] = suv * mask[(v, c)];
                            }
                        }
                        gu
                    })
                    .collect();
                Ok(Chain::ColScaled {
                    blocks: new_blocks,
                    g,
                })
            }
            Chain::ColScaled { blocks, g } => {
                let m_mid = scaled_w.nrows();
                let m_in = scaled_w.ncols();
                let m_final = blocks[0].nrows();
                if n * n * m_final * m_in > dense_limit {
                    return Err(Error::InvalidParameter(format!(
                        "empirical NTK for this depth/width needs {} dense Jacobian \
                         entries, above the {} guard; reduce the width",
                        n * n * m_final * m_in,
                        dense_limit
                    )));
                }
                let mut dense: Vec<Vec<Array2<T>>> = Vec::with_capacity(n);
                for u in 0..n {
                    let rows: Vec<Array2<T>> = (0..n)
                        .into_par_iter()
                        .map(|v| {
                            // B_u · diag(g[u][v,:]) · ρW · diag(mask[v,:])
                            let mut mid = scaled_w.clone();
                            for k in 0..m_mid {
                                let gk = g[u][(v, k)];
                                for c in 0..m_in {
                                    mid[(k, c)] = mid[(k, c)] * gk;
                                }
                            }
                            let mut block = blocks[u].dot(&mid);
                            for mut row in block.rows_mut() {
                                for (c, x) in row.iter_mut().enumerate() {
                                    *x = *x * mask[(v, c)];
                                }
                            }
                            block
                        })
                        .collect();
                    dense.push(rows);
                }
                Ok(Chain::Dense { blocks: dense })
            }
            Chain::Dense { blocks } => {
                let dense: Vec<Vec<Array2<T>>> = blocks
                    .into_iter()
                    .map(|row| {
                        row.into_par_iter()
                            .enumerate()
                            .map(|(v, d)| {
                                let mut block = d.dot(&scaled_w);
                                for mut r in block.rows_mut() {
                                    for (c, x) in r.iter_mut().enumerate() {
                                        *x = *x * mask[(v, c)];
                                    }
                                }
                                block
                            })
                            .collect()
                    })
                    .collect();
                Ok(Chain::Dense { blocks: dense })
            }
        }
    }

    /// Descend through an aggregation: `D_pre(u,v) = Σ_w D_post(u,w)·M[w,v]`.
    fn descend_aggregation(self, op: &PropagationMatrix<T>, n: usize) -> Chain<T> {
        match self {
            Chain::Delta => Chain::RowScaled {
                s: op.to_dense(),
                blocks: (0..n)
                    .map(|_| Array2::eye(op.rows.len()))
                    .collect(),
            },
            Chain::RowScaled { s, blocks } => Chain::RowScaled {
                s: s.dot(&op.to_dense()),
                blocks,
            },
            Chain::ColScaled { blocks, g } => Chain::ColScaled {
                blocks,
                g: g.iter().map(|gu| op.left_multiply_transpose(gu)).collect(),
            },
            Chain::Dense { blocks } => {
                let dense: Vec<Vec<Array2<T>>> = blocks
                    .iter()
                    .map(|row| {
                        (0..n)
                            .map(|v| {
                                let (r, c) = row[0].dim();
                                let mut acc = Array2::zeros((r, c));
                                for &(w, weight) in op.column(v) {
                                    acc.scaled_add(weight, &row[w]);
                                }
                                acc
                            })
                            .collect()
                    })
                    .collect();
                Chain::Dense { blocks: dense }
            }
        }
    }
}

const DENSE_CHAIN_LIMIT: usize = 1 << 28;

/// Exact empirical NTK of one parameter draw.
fn empirical_ntk_single<T: Scalar>(
    op: &PropagationMatrix<T>,
    features: &FeatureMatrix<T>,
    params: &GcnParams<T>,
    config: &GcnConfig<T>,
) -> Result<Array2<T>> {
    let cache = forward(op, features, params, config)?;
    let n = op.node_count();
    let m_final = params.width;
    if params.output_dim.is_some() {
        return Err(Error::InvalidParameter(
            "empirical NTK is defined on the full-width output, not a readout".into(),
        ));
    }
    let sigma_w = config.sigma_w_sq.sqrt();
    let sigma_b = config.sigma_b_sq.sqrt();
    let ones: Array2<T> = Array2::from_elem((n, n), T::one());
    let mut theta: Array2<T> = Array2::zeros((n, n));
    let mut chain = Chain::Delta;
    let mut layer = config.layer_count();
    for _ in 0..config.units {
        for _ in 0..config.transforms_per_unit {
            layer -= 1;
            let w = &params.weights[layer];
            let a = &cache.phi_inputs[layer];
            let m_in = w.ncols();
            let rho = sigma_w / T::from_count(m_in).sqrt();
            let phi = a.mapv(|x| config.activation.apply(x));
            let gram = phi.dot(&phi.t());
            let contracted = chain.contract(&gram, n, m_final);
            theta.scaled_add(rho * rho, &contracted);
            if sigma_b > T::zero() {
                let bias_contracted = chain.contract(&ones, n, m_final);
                theta.scaled_add(sigma_b * sigma_b, &bias_contracted);
            }
            let mask = a.mapv(|x| config.activation.derivative(x));
            chain = chain.descend_transform(w, rho, &mask, n, DENSE_CHAIN_LIMIT)?;
        }
        chain = chain.descend_aggregation(op, n);
    }
    // Embedding block: unit prefactor, no bias, gram of the raw features.
    let feature_gram = features.values().dot(&features.values().t());
    let contracted = chain.contract(&feature_gram, n, m_final);
    theta += &contracted;
    // Enforce exact symmetry (contract already mirrors, this is belt and
    // braces against accumulation order).
    for u in 0..n {
        for v in (u + 1)..n {
            let m = (theta[(u, v)] + theta[(v, u)]) / T::lit(2.0);
            theta[(u, v)] = m;
            theta[(v, u)] = m;
        }
    }
    Ok(theta)
}

/// Monte-Carlo empirical NTK: average over `num_inits` independent draws of
/// the exact per-draw kernel `(1/m)Σᵢ ∇θ h_i(u)·∇θ h_i(u')`. Deterministic
/// in the seed; inits run in parallel.
pub fn empirical_ntk<T: Scalar>(
    graph: &Graph,
    features: &FeatureMatrix<T>,
    config: &GcnConfig<T>,
    width: usize,
    num_inits: usize,
    seed: u64,
) -> Result<EmpiricalNtk<T>> {
    config.validate()?;
    if width < 8 {
        return Err(Error::InvalidParameter(format!(
            "empirical NTK needs width >= 8, got {width}"
        )));
    }
    if num_inits == 0 {
        return Err(Error::InvalidParameter("num_inits must be >= 1".into()));
    }
    let n = graph.node_count();
    if n * width * width > DENSE_CHAIN_LIMIT {
        return Err(Error::InvalidParameter(format!(
            "empirical NTK Jacobian blocks need {} entries, above the {} guard",
            n * width * width,
            DENSE_CHAIN_LIMIT
        )));
    }
    let op = PropagationMatrix::build(graph, config.aggregation);
    let d = features.dim();
    let kernels: Vec<Array2<T>> = (0..num_inits)
        .into_par_iter()
        .map(|init| {
            let params = GcnParams::init(config, d, width, None, derive_seed(seed, init as u64))?;
            empirical_ntk_single(&op, features, &params, config)
        })
        .collect::<Result<_>>()?;
    let mut matrix: Array2<T> = Array2::zeros((n, n));
    for k in &kernels {
        matrix += k;
    }
    matrix.mapv_inplace(|x| x / T::from_count(num_inits));
    Ok(EmpiricalNtk {
        matrix,
        width,
        num_inits,
    })
}

/// Per-epoch training statistics.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Full-batch gradient descent on the MSE against one-hot train labels.
/// With a sampler present, training forward/backward passes run on a
/// sampled subgraph (fresh per epoch when `resample_each_epoch`), while the
/// reported accuracies always use the full graph. Deterministic in the seed.
#[allow(clippy::too_many_arguments)]
pub fn train_gcn<T: Scalar>(
    graph: &Graph,
    features: &FeatureMatrix<T>,
    labels: &LabelVector,
    split: &DatasetSplit,
    config: &GcnConfig<T>,
    width: usize,
    epochs: usize,
    learning_rate: T,
    sampler: Option<&SampleConfig>,
    seed: u64,
) -> Result<Vec<EpochStats>> {
    config.validate()?;
    if learning_rate <= T::zero() {
        return Err(Error::InvalidParameter("learning rate must be positive".into()));
    }
    if split.train.is_empty() {
        return Err(Error::InvalidParameter("empty train split".into()));
    }
    let num_classes = labels.num_classes();
    let mut params = GcnParams::init(
        config,
        features.dim(),
        width,
        Some(num_classes),
        derive_seed(seed, 0),
    )?;
    let full_op = PropagationMatrix::build(graph, config.aggregation);
    let sampler_seed = derive_seed(seed, 1);
    let static_sampled_op = match sampler {
        Some(cfg) if !cfg.resample_each_epoch => {
            let sub = sample_edges_seeded(graph, cfg, sampler_seed)?;
            Some(PropagationMatrix::build(&sub, config.aggregation))
        }
        _ => None,
    };
    let y_train: Array2<T> = labels.one_hot(&split.train)?;
    let n_train = split.train.len();
    let inv_n = T::one() / T::from_count(n_train);
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let epoch_op_storage;
        let train_op: &PropagationMatrix<T> = match (sampler, &static_sampled_op) {
            (Some(cfg), None) => {
                let sub = sample_edges_seeded(graph, cfg, derive_seed(sampler_seed, epoch as u64))?;
                epoch_op_storage = PropagationMatrix::build(&sub, config.aggregation);
                &epoch_op_storage
            }
            (Some(_), Some(op)) => op,
            (None, _) => &full_op,
        };
        let cache = forward(train_op, features, &params, config)?;
        // MSE over the train rows: L = 1/(2 n_tr) Σ ||out - y||².
        let mut grad_out: Array2<T> = Array2::zeros(cache.output.dim());
        let mut loss = T::zero();
        for (row, &node) in split.train.iter().enumerate() {
            for c in 0..num_classes {
                let diff = cache.output[(node, c)] - y_train[(row, c)];
                loss += diff * diff;
                grad_out[(node, c)] = diff * inv_n;
            }
        }
        let loss = (loss * inv_n / T::lit(2.0)).as_f64();
        if !loss.is_finite() || loss > 1e6 {
            return Err(Error::Numerical(format!(
                "training diverged at epoch {epoch}: loss {loss:e}"
            )));
        }
        // Accuracies on the full (unsampled) graph.
        let eval_cache = if sampler.is_some() {
            forward(&full_op, features, &params, config)?
        } else {
            cache.clone()
        };
        let preds = argmax_rows(&eval_cache.output);
        let train_preds: Vec<usize> = split.train.iter().map(|&u| preds[u]).collect();
        let test_preds: Vec<usize> = split.test.iter().map(|&u| preds[u]).collect();
        history.push(EpochStats {
            epoch,
            loss,
            train_accuracy: labels.accuracy(&split.train, &train_preds),
            test_accuracy: labels.accuracy(&split.test, &test_preds),
        });
        let grads = backward(train_op, features, &params, config, &cache, &grad_out)?;
        params.embed.scaled_add(-learning_rate, &grads.embed);
        for (w, gw) in params.weights.iter_mut().zip(&grads.weights) {
            w.scaled_add(-learning_rate, gw);
        }
        for (b, gb) in params.biases.iter_mut().zip(&grads.biases) {
            b.scaled_add(-learning_rate, gb);
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{max_abs_diff, symmetric_eigenvalues, symmetry_defect};
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    fn path_graph(n: usize) -> Graph {
        Graph::from_edges(n, (0..n - 1).map(|u| (u, u + 1))).unwrap()
    }

    fn random_features(n: usize, d: usize, seed: u64) -> FeatureMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Array2::from_shape_fn((n, d), |_| rng.random::<f64>() + 0.05);
        FeatureMatrix::unit_normalized(raw).unwrap()
    }

    #[test]
    fn one_parameter_network_hand_value() {
        // Single node, feature [1], R = 1, L = 1, width 1, relu EOC, and all
        // weights set to one: output = √2·W·φ(W₀·x) = √2.
        let g = Graph::parse_edge_list("#nodes 1", "mem").unwrap();
        let f = FeatureMatrix::raw(array![[1.0]]).unwrap();
        let config = GcnConfig::<f64>::relu_eoc(1, 1);
        let mut params = GcnParams::init(&config, 1, 2, None, 0).unwrap();
        params.embed = array![[1.0], [1.0]];
        params.weights[0] = array![[1.0, 1.0], [1.0, 1.0]];
        params.biases[0] = array![0.0, 0.0];
        params.width = 2;
        let op = PropagationMatrix::build(&g, AggregationKind::MeanWithSelf);
        let cache = forward(&op, &f, &params, &config).unwrap();
        // width 2: h = (√2/√2)·(φ(1)+φ(1)) = 2 per coordinate.
        assert!((cache.output[(0, 0)] - 2.0).abs() < 1e-12);

        // Width 1 gives exactly √2·φ(1).
        let mut p1 = GcnParams::init(&config, 1, 2, None, 0).unwrap();
        p1.embed = array![[1.0]];
        p1.weights[0] = array![[1.0]];
        p1.biases[0] = array![0.0];
        p1.width = 1;
        let cache = forward(&op, &f, &p1, &config).unwrap();
        assert!((cache.output[(0, 0)] - std::f64::consts::SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_give_bias_only_output() {
        let g = path_graph(4);
        let f = random_features(4, 3, 1);
        let config = GcnConfig::<f64>::tanh(2, 1, 1.5, 0.25);
        let mut params = GcnParams::init(&config, 3, 5, None, 2).unwrap();
        for w in &mut params.weights {
            w.fill(0.0);
        }
        params.embed.fill(0.0);
        let op = PropagationMatrix::build(&g, AggregationKind::MeanWithSelf);
        let cache = forward(&op, &f, &params, &config).unwrap();
        // Output rows are σ_b·b of the last layer for every node.
        let sigma_b = 0.25f64.sqrt();
        for u in 0..4 {
            for c in 0..5 {
                assert!(
                    (cache.output[(u, c)] - sigma_b * params.biases[1][c]).abs() < 1e-14
                );
            }
        }
    }

    #[test]
    fn forward_is_permutation_equivariant() {
        let g = path_graph(5);
        let f = random_features(5, 3, 3);
        let config = GcnConfig::<f64>::relu_eoc(2, 2);
        let params = GcnParams::init(&config, 3, 6, None, 5).unwrap();
        let op = PropagationMatrix::build(&g, AggregationKind::MeanWithSelf);
        let out = forward(&op, &f, &params, &config).unwrap().output;

        // Reverse node order (an automorphism-free relabeling).
        let n = 5;
        let perm: Vec<usize> = (0..n).map(|u| n - 1 - u).collect();
        let g_p = Graph::from_edges(
            n,
            g.edges().iter().map(|&(u, v)| (perm[u], perm[v])),
        )
        .unwrap();
        let mut raw_p = Array2::zeros((n, 3));
        for u in 0..n {
            for c in 0..3 {
                raw_p[(perm[u], c)] = f.values()[(u, c)];
            }
        }
        let f_p = FeatureMatrix::raw(raw_p).unwrap();
        let op_p = PropagationMatrix::build(&g_p, AggregationKind::MeanWithSelf);
        let out_p = forward(&op_p, &f_p, &params, &config).unwrap().output;
        for u in 0..n {
            for c in 0..6 {
                assert!((out[(u, c)] - out_p[(perm[u], c)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grad_check_relu_and_tanh() {
        let g = path_graph(6);
        let f = random_features(6, 4, 7);
        let relu = GcnConfig::<f64>::relu_eoc(2, 2);
        let params = GcnParams::init(&relu, 4, 16, None, 11).unwrap();
        let err = grad_check(&g, &f, &params, &relu, 200, 13).unwrap();
        assert!(err < 1e-5, "relu grad check error {err}");

        let tanh = GcnConfig::<f64>::tanh(2, 2, 1.4, 0.09);
        let params = GcnParams::init(&tanh, 4, 16, None, 17).unwrap();
        let err = grad_check(&g, &f, &params, &tanh, 200, 19).unwrap();
        assert!(err < 1e-7, "tanh grad check error {err}");
    }

    #[test]
    fn grad_check_with_symmetric_aggregation_and_readout() {
        let g = path_graph(5);
        let f = random_features(5, 3, 23);
        let mut config = GcnConfig::<f64>::tanh(2, 1, 1.2, 0.04);
        config.aggregation = AggregationKind::SymmetricNormalized;
        let params = GcnParams::init(&config, 3, 12, Some(3), 29).unwrap();
        let err = grad_check(&g, &f, &params, &config, 200, 31).unwrap();
        assert!(err < 1e-7, "readout grad check error {err}");
    }

    /// Brute-force empirical NTK: one backward pass per output coordinate,
    /// assembling the full Jacobian gram. Independent of the chain algebra.
    fn slow_empirical_ntk(
        op: &PropagationMatrix<f64>,
        features: &FeatureMatrix<f64>,
        params: &GcnParams<f64>,
        config: &GcnConfig<f64>,
    ) -> Array2<f64> {
        let cache = forward(op, features, params, config).unwrap();
        let (n, m) = cache.output.dim();
        let flatten = |g: &GcnGrads<f64>| -> Vec<f64> {
            let mut v: Vec<f64> = g.embed.iter().copied().collect();
            for w in &g.weights {
                v.extend(w.iter().copied());
            }
            for b in &g.biases {
                v.extend(b.iter().copied());
            }
            v
        };
        let mut theta = Array2::<f64>::zeros((n, n));
        for i in 0..m {
            let mut grads: Vec<Vec<f64>> = Vec::with_capacity(n);
            for u in 0..n {
                let mut probe = Array2::<f64>::zeros((n, m));
                probe[(u, i)] = 1.0;
                let g = backward(op, features, params, config, &cache, &probe).unwrap();
                grads.push(flatten(&g));
            }
            for u in 0..n {
                for v in u..n {
                    let dot: f64 = grads[u]
                        .iter()
                        .zip(&grads[v])
                        .map(|(a, b)| a * b)
                        .sum();
                    theta[(u, v)] += dot / m as f64;
                    if v != u {
                        theta[(v, u)] += dot / m as f64;
                    }
                }
            }
        }
        theta
    }

    #[test]
    fn chain_ntk_matches_jacobian_gram_shallow() {
        // L=2, R=1 exercises Delta -> RowScaled -> ColScaled (no densify).
        let g = path_graph(4);
        let f = random_features(4, 3, 41);
        let config = GcnConfig::<f64>::relu_eoc(2, 1);
        let params = GcnParams::init(&config, 3, 6, None, 43).unwrap();
        let op = PropagationMatrix::build(&g, AggregationKind::MeanWithSelf);
        let fast = empirical_ntk_single(&op, &f, &params, &config).unwrap();
        let slow = slow_empirical_ntk(&op, &f, &params, &config);
        assert!(
            max_abs_diff(&fast, &slow) < 1e-11,
            "chain vs jacobian mismatch: {}",
            max_abs_diff(&fast, &slow)
        );
    }

    #[test]
    fn chain_ntk_matches_jacobian_gram_deep() {
        // L=3, R=2 forces the dense fallback, with bias terms active.
        let g = path_graph(3);
        let f = random_features(3, 2, 47);
        let config = GcnConfig::<f64>::tanh(3, 2, 1.3, 0.06);
        let params = GcnParams::init(&config, 2, 5, None, 53).unwrap();
        let op = PropagationMatrix::build(&g, AggregationKind::MeanWithSelf);
        let fast = empirical_ntk_single(&op, &f, &params, &config).unwrap();
        let slow = slow_empirical_ntk(&op, &f, &params, &config);
        assert!(
            max_abs_diff(&fast, &slow) < 1e-11,
            "deep chain vs jacobian mismatch: {}",
            max_abs_diff(&fast, &slow)
        );
    }

    #[test]
    fn single_node_ntk_approaches_analytic_value() {
        // Analytic Θ = [2] for R=1, L=1 at relu EOC on feature [1].
        let g = Graph::parse_edge_list("#nodes 1", "mem").unwrap();
        let f = FeatureMatrix::raw(array![[1.0]]).unwrap();
        let config = GcnConfig::<f64>::relu_eoc(1, 1);
        let est = empirical_ntk(&g, &f, &config, 2048, 8, 3).unwrap();
        assert!(
            (est.matrix[(0, 0)] - 2.0).abs() < 0.1,
            "width-2048 estimate {}",
            est.matrix[(0, 0)]
        );
    }

    #[test]
    fn empirical_ntk_is_symmetric_psd_and_deterministic() {
        let g = path_graph(5);
        let f = random_features(5, 3, 59);
        let config = GcnConfig::<f64>::relu_eoc(2, 1);
        let a = empirical_ntk(&g, &f, &config, 64, 4, 7).unwrap();
        let b = empirical_ntk(&g, &f, &config, 64, 4, 7).unwrap();
        assert_eq!(a.matrix, b.matrix);
        assert_eq!(symmetry_defect(&a.matrix), 0.0);
        let evals = symmetric_eigenvalues(&a.matrix).unwrap();
        let scale = a.matrix.diag().sum() / 5.0;
        assert!(evals[0] > -1e-10 * scale, "min eigenvalue {}", evals[0]);
    }

    #[test]
    fn empirical_ntk_guards() {
        let g = path_graph(4);
        let f = random_features(4, 2, 61);
        let config = GcnConfig::<f64>::relu_eoc(1, 1);
        assert!(empirical_ntk(&g, &f, &config, 4, 2, 1).is_err());
        assert!(empirical_ntk(&g, &f, &config, 64, 0, 1).is_err());
        assert!(GcnParams::<f64>::init(&config, 2, WIDTH_GUARD + 1, None, 1).is_err());
        let mut wide = config;
        wide.allow_wide = true;
        assert!(GcnParams::<f64>::init(&wide, 2, WIDTH_GUARD + 1, None, 1).is_ok());
    }

    #[test]
    fn training_learns_an_easy_instance() {
        let (g, labels) = crate::graph::generate_sbm(40, 0.5, 0.02, 5).unwrap();
        let f = FeatureMatrix::<f64>::identity(40);
        let split = DatasetSplit::stratified(&labels, 8, 0, 100).unwrap();
        let config = GcnConfig::<f64>::relu_eoc(2, 1);
        let history =
            train_gcn(&g, &f, &labels, &split, &config, 64, 120, 0.5, None, 9).unwrap();
        let last = history.last().unwrap();
        assert!(
            last.train_accuracy > 0.9,
            "train accuracy {} after {} epochs",
            last.train_accuracy,
            history.len()
        );
        assert!(last.loss < history[0].loss);
    }

    #[test]
    fn training_is_deterministic_and_sampler_keeps_edge_count() {
        let (g, labels) = crate::graph::generate_sbm(30, 0.5, 0.05, 6).unwrap();
        let f = FeatureMatrix::<f64>::identity(30);
        let split = DatasetSplit::stratified(&labels, 5, 0, 101).unwrap();
        let config = GcnConfig::<f64>::relu_eoc(2, 1);
        let sampler = SampleConfig::critical(77);
        let a = train_gcn(&g, &f, &labels, &split, &config, 32, 10, 0.3, Some(&sampler), 4)
            .unwrap();
        let b = train_gcn(&g, &f, &labels, &split, &config, 32, 10, 0.3, Some(&sampler), 4)
            .unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.loss.to_bits(), y.loss.to_bits(), "nondeterministic loss");
        }
        // The sampler itself keeps round(n/2) edges each epoch.
        let sub = sample_edges_seeded(&g, &sampler, 123).unwrap();
        assert_eq!(sub.edge_count(), 15);
    }

    #[test]
    fn divergent_learning_rate_is_reported() {
        let (g, labels) = crate::graph::generate_sbm(20, 0.5, 0.05, 8).unwrap();
        let f = FeatureMatrix::<f64>::identity(20);
        let split = DatasetSplit::stratified(&labels, 5, 0, 102).unwrap();
        let config = GcnConfig::<f64>::relu_eoc(2, 1);
        let err = train_gcn(&g, &f, &labels, &split, &config, 32, 400, 1e4, None, 4);
        match err {
            Err(Error::Numerical(msg)) => assert!(msg.contains("diverged"), "{msg}"),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
