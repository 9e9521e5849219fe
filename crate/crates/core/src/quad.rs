//! Gauss–Hermite quadrature adapted to the standard normal measure.
//!
//! Nodes and weights are found by Newton iteration on the physicists'
//! Hermite polynomials (normalized recurrence), then rescaled so that
//! `expect(f) ≈ E[f(Z)]` with `Z ~ N(0,1)` and the weights sum to one.
//! Root finding always runs in `f64` and converts afterwards, so an `f32`
//! instantiation still gets full-accuracy nodes.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct GaussHermite<T> {
    /// Evaluation points for the N(0,1) measure (symmetric about zero).
    nodes: Vec<T>,
    /// Matching weights, summing to one.
    weights: Vec<T>,
}

impl<T: Scalar> GaussHermite<T> {
    pub fn new(order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidParameter("quadrature order must be >= 1".into()));
        }
        let (raw_nodes, raw_weights) = hermite_rule(order)?;
        let sqrt2 = std::f64::consts::SQRT_2;
        let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
        let nodes = raw_nodes.iter().map(|&x| T::lit(x * sqrt2)).collect();
        let weights = raw_weights.iter().map(|&w| T::lit(w * inv_sqrt_pi)).collect();
        Ok(GaussHermite { nodes, weights })
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// `E[f(Z)]` for `Z ~ N(0,1)`.
    pub fn expect<F: Fn(T) -> T>(&self, f: F) -> T {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&z, &w)| w * f(z))
            .sum()
    }

    /// `E[f(Z1, Z2)]` for independent standard normal `Z1, Z2` via the
    /// tensor-product rule.
    pub fn expect2<F: Fn(T, T) -> T>(&self, f: F) -> T {
        let mut acc = T::zero();
        for (&z1, &w1) in self.nodes.iter().zip(&self.weights) {
            let mut inner = T::zero();
            for (&z2, &w2) in self.nodes.iter().zip(&self.weights) {
                inner += w2 * f(z1, z2);
            }
            acc += w1 * inner;
        }
        acc
    }

    pub fn nodes(&self) -> &[T] {
        &self.nodes
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }
}

/// Nodes (ascending) and weights of the n-point rule for weight exp(-x^2).
fn hermite_rule(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let half = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0f64;
    for i in 0..half {
        // Initial guesses, largest root first (classic gauher schedule).
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * nodes[n - 1],
            3 => 1.91 * z - 0.91 * nodes[n - 2],
            _ => 2.0 * z - nodes[n - i + 1],
        };
        let mut pp = 0.0;
        let mut converged = false;
        for _ in 0..200 {
            // Normalized Hermite recurrence up to degree n and its derivative.
            let mut p1 = std::f64::consts::PI.powf(-0.25);
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < 1e-15 {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NoConvergence {
                iterations: 200,
                residual: f64::NAN,
            });
        }
        nodes[n - 1 - i] = z;
        nodes[i] = -z;
        let w = 2.0 / (pp * pp);
        weights[n - 1 - i] = w;
        weights[i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    Ok((nodes, weights))
}
