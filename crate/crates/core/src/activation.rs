//! Dual activations: the bivariate Gaussian expectations
//! `σ²_w·E[φ(z₁)φ(z₂)] + σ²_b` and `σ²_w·E[φ'(z₁)φ'(z₂)] + σ²_b` that drive
//! the kernel transformation step, in closed form for ReLU and by 2-D
//! Gauss–Hermite quadrature for tanh, plus the edge-of-chaos solver.

use crate::error::{Error, Result};
use crate::quad::GaussHermite;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative; the ReLU subgradient at zero is taken as zero.
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::InvalidParameter(format!(
                "unknown activation {other:?} (expected relu or tanh)"
            ))),
        }
    }
}

/// Result of one dual-activation evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualActivationResult<T> {
    /// `σ²_w·E[φ(z₁)φ(z₂)] + σ²_b` — the next covariance entry.
    pub e_phi_phi: T,
    /// `σ²_w·E[φ'(z₁)φ'(z₂)] + σ²_b` — the derivative-kernel entry.
    pub e_dphi_dphi: T,
}

/// Evaluator for dual activations at fixed variance scales.
#[derive(Debug, Clone)]
pub struct DualKernel<T> {
    activation: Activation,
    sigma_w_sq: T,
    sigma_b_sq: T,
    quad: Option<Arc<GaussHermite<T>>>,
}

impl<T: Scalar> DualKernel<T> {
    pub fn new(
        activation: Activation,
        sigma_w_sq: T,
        sigma_b_sq: T,
        quadrature_order: usize,
    ) -> Result<Self> {
        if sigma_w_sq <= T::zero() {
            return Err(Error::InvalidParameter(format!(
                "sigma_w_sq must be positive, got {sigma_w_sq}"
            )));
        }
        if sigma_b_sq < T::zero() {
            return Err(Error::InvalidParameter(format!(
                "sigma_b_sq must be nonnegative, got {sigma_b_sq}"
            )));
        }
        let quad = match activation {
            Activation::Relu => None,
            Activation::Tanh => {
                if quadrature_order < 20 {
                    return Err(Error::InvalidParameter(format!(
                        "tanh quadrature order must be >= 20, got {quadrature_order}"
                    )));
                }
                Some(Arc::new(GaussHermite::new(quadrature_order)?))
            }
        };
        Ok(DualKernel {
            activation,
            sigma_w_sq,
            sigma_b_sq,
            quad,
        })
    }

    /// ReLU at the edge of chaos: `σ²_w = 2`, `σ²_b = 0`.
    pub fn relu_eoc() -> Self {
        DualKernel {
            activation: Activation::Relu,
            sigma_w_sq: T::lit(2.0),
            sigma_b_sq: T::zero(),
            quad: None,
        }
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn sigma_w_sq(&self) -> T {
        self.sigma_w_sq
    }

    pub fn sigma_b_sq(&self) -> T {
        self.sigma_b_sq
    }

    /// Evaluate both expectations for the 2x2 Gaussian with variances
    /// `q_u`, `q_v` and covariance `s`. The correlation must already lie in
    /// `[-1, 1]` (the kernel engine clamps and counts before calling).
    pub fn eval(&self, q_u: T, q_v: T, s: T) -> Result<DualActivationResult<T>> {
        if q_u <= T::zero() || q_v <= T::zero() {
            return Err(Error::Numerical(format!(
                "non-positive variance in dual activation: q_u={q_u}, q_v={q_v}"
            )));
        }
        let scale = (q_u * q_v).sqrt();
        let c = (s / scale).min(T::one()).max(-T::one());
        Ok(match self.activation {
            Activation::Relu => {
                // Arc-cosine closed forms: with θ = arccos(c),
                //   E[φφ] = √(q_u q_v)·(sin θ + (π-θ)·c)/(2π)
                //   E[φ'φ'] = (π-θ)/(2π)
                let theta = c.acos();
                let pi = T::lit(std::f64::consts::PI);
                let raw_phi = scale * (theta.sin() + (pi - theta) * c) / (T::lit(2.0) * pi);
                let raw_dphi = (pi - theta) / (T::lit(2.0) * pi);
                DualActivationResult {
                    e_phi_phi: self.sigma_w_sq * raw_phi + self.sigma_b_sq,
                    e_dphi_dphi: self.sigma_w_sq * raw_dphi + self.sigma_b_sq,
                }
            }
            Activation::Tanh => {
                let quad = self.quad.as_ref().expect("tanh kernel carries quadrature");
                let su = q_u.sqrt();
                let sv = q_v.sqrt();
                let root = (T::one() - c * c).max(T::zero()).sqrt();
                // z₂ = c·z₁ + √(1-c²)·z decomposition of the correlated pair.
                let phi = quad.expect2(|z1, z2| {
                    (su * z1).tanh() * (sv * (c * z1 + root * z2)).tanh()
                });
                let dphi = quad.expect2(|z1, z2| {
                    let a = (su * z1).tanh();
                    let b = (sv * (c * z1 + root * z2)).tanh();
                    (T::one() - a * a) * (T::one() - b * b)
                });
                DualActivationResult {
                    e_phi_phi: self.sigma_w_sq * phi + self.sigma_b_sq,
                    e_dphi_dphi: self.sigma_w_sq * dphi + self.sigma_b_sq,
                }
            }
        })
    }
}

/// ReLU dual activation at the edge of chaos (`σ²_w = 2`, `σ²_b = 0`):
/// `e_phi_phi = √(q_u q_v)·f(c)` with
/// `f(c) = (2c·arcsin c + 2√(1-c²) + cπ)/(2π)` and
/// `e_dphi_dphi = f'(c) = (1/π)·arcsin c + 1/2`.
pub fn relu_dual<T: Scalar>(q_u: T, q_v: T, s: T) -> Result<DualActivationResult<T>> {
    DualKernel::relu_eoc().eval(q_u, q_v, s)
}

/// Tanh dual activation by 2-D Gauss–Hermite product quadrature with the
/// given variance scales.
pub fn tanh_dual<T: Scalar>(
    q_u: T,
    q_v: T,
    s: T,
    order: usize,
    sigma_w_sq: T,
    sigma_b_sq: T,
) -> Result<DualActivationResult<T>> {
    DualKernel::new(Activation::Tanh, sigma_w_sq, sigma_b_sq, order)?.eval(q_u, q_v, s)
}

/// The ReLU edge-of-chaos correlation map
/// `f(c) = (2c·arcsin c + 2√(1-c²) + cπ)/(2π)`.
pub fn relu_correlation_map<T: Scalar>(c: T) -> T {
    let c = c.min(T::one()).max(-T::one());
    let pi = T::lit(std::f64::consts::PI);
    let two = T::lit(2.0);
    (two * c * c.asin() + two * (T::one() - c * c).max(T::zero()).sqrt() + c * pi) / (two * pi)
}

/// Its derivative `f'(c) = (1/π)·arcsin c + 1/2`.
pub fn relu_correlation_map_derivative<T: Scalar>(c: T) -> T {
    let c = c.min(T::one()).max(-T::one());
    let pi = T::lit(std::f64::consts::PI);
    c.asin() / pi + T::lit(0.5)
}

/// A solved edge-of-chaos point: hyperparameters on the critical line
/// `σ²_w·E[φ'(√q* Z)²] = 1` together with the variance fixed point `q*` of
/// `q ↦ σ²_w·E[φ(√q Z)²] + σ²_b`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EdgeOfChaos<T> {
    pub sigma_w_sq: T,
    pub sigma_b_sq: T,
    pub q_star: T,
    /// Set when the fixed point collapses to zero (tanh with `σ²_b = 0`,
    /// where the critical line terminates at `σ²_w = 1`).
    pub degenerate: bool,
    /// `|q* - (σ²_w·E[φ(√q* Z)²] + σ²_b)|` re-evaluated after the solve.
    pub fixed_point_residual: T,
    /// `|σ²_w·E[φ'(√q* Z)²] - 1|` re-evaluated after the solve.
    pub chaos_residual: T,
}

/// Variance fixed point of `q ↦ σ²_w·E[φ(√q Z)²] + σ²_b` for tanh.
fn tanh_q_fixed_point<T: Scalar>(
    sigma_w_sq: T,
    sigma_b_sq: T,
    quad: &GaussHermite<T>,
    tol: T,
) -> T {
    let mut q = T::one().max(sigma_b_sq);
    for _ in 0..20_000 {
        let sq = q.sqrt();
        let next = sigma_w_sq * quad.expect(|z| {
            let t = (sq * z).tanh();
            t * t
        }) + sigma_b_sq;
        let delta = (next - q).abs();
        q = next;
        if delta < tol {
            break;
        }
    }
    q
}

fn tanh_chi<T: Scalar>(sigma_w_sq: T, q: T, quad: &GaussHermite<T>) -> T {
    let sq = q.max(T::zero()).sqrt();
    sigma_w_sq
        * quad.expect(|z| {
            let t = (sq * z).tanh();
            let d = T::one() - t * t;
            d * d
        })
}

/// Solve the edge-of-chaos condition for the given activation and bias
/// variance: returns `(σ²_w, q*)` such that the variance fixed point and the
/// chaos condition hold simultaneously. For ReLU the answer is the fixed
/// point `σ²_w = 2` and requires `σ²_b = 0`; for tanh the inner fixed point
/// is iterated to 1e-12 and the outer bisection on `σ²_w` to 1e-10.
pub fn edge_of_chaos_solve<T: Scalar>(
    activation: Activation,
    sigma_b_sq: T,
) -> Result<EdgeOfChaos<T>> {
    if sigma_b_sq < T::zero() {
        return Err(Error::InvalidParameter(format!(
            "sigma_b_sq must be nonnegative, got {sigma_b_sq}"
        )));
    }
    match activation {
        Activation::Relu => {
            if sigma_b_sq > T::zero() {
                return Err(Error::InvalidParameter(
                    "relu has no edge-of-chaos variance fixed point with sigma_b_sq > 0"
                        .into(),
                ));
            }
            // q ← (σ²_w/2)·q preserves any input variance at σ²_w = 2;
            // report the conventional q* = 1.
            Ok(EdgeOfChaos {
                sigma_w_sq: T::lit(2.0),
                sigma_b_sq,
                q_star: T::one(),
                degenerate: false,
                fixed_point_residual: T::zero(),
                chaos_residual: T::zero(),
            })
        }
        Activation::Tanh => {
            if sigma_b_sq == T::zero() {
                // The critical line terminates at (σ²_w, q*) = (1, 0): the
                // variance map contracts to zero for σ²_w <= 1, and the
                // chaos condition at q = 0 reads σ²_w·φ'(0)² = σ²_w = 1.
                return Ok(EdgeOfChaos {
                    sigma_w_sq: T::one(),
                    sigma_b_sq,
                    q_star: T::zero(),
                    degenerate: true,
                    fixed_point_residual: T::zero(),
                    chaos_residual: T::zero(),
                });
            }
            let quad = GaussHermite::<T>::new(80)?;
            let inner_tol = T::lit(1e-12);
            let chi_of = |sw: T| {
                let q = tanh_q_fixed_point(sw, sigma_b_sq, &quad, inner_tol);
                (tanh_chi(sw, q, &quad), q)
            };
            let mut lo = T::lit(1e-3);
            let mut hi = T::lit(1.0);
            // Expand hi until chi(hi) >= 1.
            let mut chi_hi = chi_of(hi).0;
            let mut guard = 0;
            while chi_hi < T::one() {
                hi = hi * T::lit(2.0);
                chi_hi = chi_of(hi).0;
                guard += 1;
                if guard > 60 {
                    return Err(Error::NoConvergence {
                        iterations: guard,
                        residual: (chi_hi - T::one()).abs().as_f64(),
                    });
                }
            }
            let outer_tol = T::lit(1e-10);
            for _ in 0..200 {
                let mid = (lo + hi) / T::lit(2.0);
                let (chi, _) = chi_of(mid);
                if chi < T::one() {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo < outer_tol {
                    break;
                }
            }
            let sigma_w_sq = (lo + hi) / T::lit(2.0);
            let (chi, q_star) = chi_of(sigma_w_sq);
            let sq = q_star.sqrt();
            let fixed_point_residual = (sigma_w_sq
                * quad.expect(|z| {
                    let t = (sq * z).tanh();
                    t * t
                })
                + sigma_b_sq
                - q_star)
                .abs();
            let degenerate = q_star < T::lit(1e-9);
            Ok(EdgeOfChaos {
                sigma_w_sq,
                sigma_b_sq,
                q_star,
                degenerate,
                fixed_point_residual,
                chaos_residual: (chi - T::one()).abs(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Monte-Carlo oracle for the bivariate Gaussian expectations of the
    /// dual activation, independent of the quadrature/closed-form path.
    fn mc_dual(
        activation: Activation,
        q_u: f64,
        q_v: f64,
        s: f64,
        sigma_w_sq: f64,
        sigma_b_sq: f64,
        samples: usize,
        seed: u64,
    ) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = s / (q_u * q_v).sqrt();
        let root = (1.0 - c * c).max(0.0).sqrt();
        let (su, sv) = (q_u.sqrt(), q_v.sqrt());
        let mut acc_phi = 0.0;
        let mut acc_dphi = 0.0;
        let mut draw = |rng: &mut ChaCha8Rng| {
            // Box-Muller
            let u1: f64 = rng.random::<f64>().max(1e-300);
            let u2: f64 = rng.random();
            let r = (-2.0 * u1.ln()).sqrt();
            let (s2, c2) = (2.0 * std::f64::consts::PI * u2).sin_cos();
            (r * c2, r * s2)
        };
        for _ in 0..samples {
            let (g1, g2) = draw(&mut rng);
            let z1 = su * g1;
            let z2 = sv * (c * g1 + root * g2);
            acc_phi += activation.apply(z1) * activation.apply(z2);
            acc_dphi += activation.derivative(z1) * activation.derivative(z2);
        }
        let n = samples as f64;
        (
            sigma_w_sq * acc_phi / n + sigma_b_sq,
            sigma_w_sq * acc_dphi / n + sigma_b_sq,
        )
    }

    #[test]
    fn relu_perfectly_correlated_is_identity() {
        let r = relu_dual::<f64>(1.0, 1.0, 1.0).unwrap();
        assert!((r.e_phi_phi - 1.0).abs() < 1e-15);
        assert!((r.e_dphi_dphi - 1.0).abs() < 1e-15);
    }

    #[test]
    fn relu_uncorrelated_closed_form() {
        let r = relu_dual::<f64>(1.0, 1.0, 0.0).unwrap();
        assert!((r.e_phi_phi - 1.0 / std::f64::consts::PI).abs() < 1e-15);
        assert!((r.e_dphi_dphi - 0.5).abs() < 1e-15);
    }

    #[test]
    fn relu_half_correlation_matches_monte_carlo() {
        // Closed form: f(0.5) = 0.608997781..., f'(0.5) = 2/3.
        let r = relu_dual::<f64>(1.0, 1.0, 0.5).unwrap();
        assert!((r.e_phi_phi - 0.6089977810442295).abs() < 1e-12);
        assert!((r.e_dphi_dphi - 2.0 / 3.0).abs() < 1e-12);
        let (mc_phi, mc_dphi) = mc_dual(Activation::Relu, 1.0, 1.0, 0.5, 2.0, 0.0, 10_000_000, 42);
        assert!((r.e_phi_phi - mc_phi).abs() < 1e-3, "{} vs {}", r.e_phi_phi, mc_phi);
        assert!((r.e_dphi_dphi - mc_dphi).abs() < 1e-3);
    }

    #[test]
    fn relu_dual_scales_with_variances() {
        // Homogeneity: E[φ(a z1)φ(b z2)] = ab·E over unit variances.
        let unit = relu_dual::<f64>(1.0, 1.0, 0.5).unwrap();
        let scaled = relu_dual::<f64>(4.0, 9.0, 0.5 * 6.0).unwrap();
        assert!((scaled.e_phi_phi - 6.0 * unit.e_phi_phi).abs() < 1e-12);
        assert!((scaled.e_dphi_dphi - unit.e_dphi_dphi).abs() < 1e-15);
    }

    #[test]
    fn relu_map_matches_dual() {
        for c in [-0.9, -0.3, 0.0, 0.2, 0.7, 0.99, 1.0] {
            let via_dual = relu_dual::<f64>(1.0, 1.0, c).unwrap();
            assert!((relu_correlation_map::<f64>(c) - via_dual.e_phi_phi).abs() < 1e-14);
            assert!(
                (relu_correlation_map_derivative::<f64>(c) - via_dual.e_dphi_dphi).abs() < 1e-14
            );
        }
    }

    #[test]
    fn relu_map_is_monotone_and_dominates_identity() {
        let mut prev = relu_correlation_map::<f64>(0.0);
        for k in 1..=100 {
            let c = k as f64 / 100.0;
            let f = relu_correlation_map::<f64>(c);
            assert!(f >= c - 1e-15, "f({c}) = {f} < c");
            assert!(f >= prev, "map not increasing at {c}");
            prev = f;
        }
    }

    #[test]
    fn non_positive_variance_rejected() {
        assert!(relu_dual::<f64>(0.0, 1.0, 0.0).is_err());
        assert!(tanh_dual::<f64>(1.0, -1.0, 0.0, 40, 1.0, 0.0).is_err());
    }

    #[test]
    fn tanh_perfect_correlation_reduces_to_1d() {
        // c = 1 collapses the double integral to E[φ'(√q z)²].
        let q: f64 = 0.7;
        let quad = GaussHermite::<f64>::new(60).unwrap();
        let oned = 1.3 * quad.expect(|z| {
            let t = (q.sqrt() * z as f64).tanh();
            let d = 1.0 - t * t;
            d * d
        }) + 0.02;
        let r = tanh_dual::<f64>(q, q, q, 60, 1.3, 0.02).unwrap();
        assert!((r.e_dphi_dphi - oned).abs() < 1e-12);
    }

    #[test]
    fn tanh_odd_symmetry_kills_uncorrelated_term() {
        let r = tanh_dual::<f64>(1.0, 1.0, 0.0, 60, 1.0, 0.0).unwrap();
        assert!(r.e_phi_phi.abs() < 1e-14, "{}", r.e_phi_phi);
    }

    #[test]
    fn tanh_dual_matches_monte_carlo() {
        let r = tanh_dual::<f64>(1.0, 1.0, 0.5, 60, 1.2, 0.05).unwrap();
        let (mc_phi, mc_dphi) =
            mc_dual(Activation::Tanh, 1.0, 1.0, 0.5, 1.2, 0.05, 10_000_000, 7);
        assert!((r.e_phi_phi - mc_phi).abs() < 1e-3, "{} vs {mc_phi}", r.e_phi_phi);
        assert!((r.e_dphi_dphi - mc_dphi).abs() < 1e-3);
    }

    #[test]
    fn tanh_quadrature_order_stability() {
        // Order 40 vs 80 on the variance range the edge-of-chaos engine
        // actually visits (q well below 1; Gauss-Hermite accuracy for tanh
        // is limited by the pole distance, which shrinks as 1/sqrt(q)).
        for &q in &[0.05, 0.1, 0.2, 0.3] {
            for &c in &[-0.95, -0.25, 0.0, 0.3, 0.55, 0.8, 0.99] {
                let s = c * q;
                let coarse = tanh_dual::<f64>(q, q, s, 40, 1.5, 0.1).unwrap();
                let fine = tanh_dual::<f64>(q, q, s, 80, 1.5, 0.1).unwrap();
                assert!(
                    (coarse.e_phi_phi - fine.e_phi_phi).abs() < 1e-10,
                    "phi unstable at q={q}, c={c}"
                );
                assert!(
                    (coarse.e_dphi_dphi - fine.e_dphi_dphi).abs() < 1e-10,
                    "dphi unstable at q={q}, c={c}"
                );
            }
        }
    }

    #[test]
    fn relu_edge_of_chaos_is_fixed() {
        let eoc = edge_of_chaos_solve::<f64>(Activation::Relu, 0.0).unwrap();
        assert_eq!(eoc.sigma_w_sq, 2.0);
        assert!(!eoc.degenerate);
        assert!(edge_of_chaos_solve::<f64>(Activation::Relu, 0.1).is_err());
    }

    #[test]
    fn tanh_zero_bias_degenerates_at_unit_gain() {
        let eoc = edge_of_chaos_solve::<f64>(Activation::Tanh, 0.0).unwrap();
        assert!(eoc.degenerate, "q* = {}", eoc.q_star);
        assert_eq!(eoc.sigma_w_sq, 1.0);
        assert_eq!(eoc.q_star, 0.0);
        // Sweep of the variance fixed point just above unit gain: q* shrinks
        // toward zero as σ²_w approaches 1, confirming the degenerate limit.
        let quad = GaussHermite::<f64>::new(80).unwrap();
        let mut prev = f64::INFINITY;
        for sw in [1.3, 1.1, 1.05, 1.02] {
            let q = tanh_q_fixed_point(sw, 0.0, &quad, 1e-14);
            assert!(q < prev, "q* not shrinking at sw={sw}");
            prev = q;
        }
        assert!(prev < 0.02, "q* near unit gain is {prev}");
    }

    #[test]
    fn tanh_eoc_matches_external_oracle() {
        // Frozen from an independent solver (200-point quadrature + Brent
        // root finding): sb^2 = 0.05 -> (1.7609546396, 0.5700478816) and
        // sb^2 = 0.1 -> (1.9860726411, 0.8057991819).
        let a = edge_of_chaos_solve::<f64>(Activation::Tanh, 0.05).unwrap();
        assert!((a.sigma_w_sq - 1.7609546396).abs() < 1e-7, "{}", a.sigma_w_sq);
        assert!((a.q_star - 0.5700478816).abs() < 1e-7, "{}", a.q_star);
        let b = edge_of_chaos_solve::<f64>(Activation::Tanh, 0.1).unwrap();
        assert!((b.sigma_w_sq - 1.9860726411).abs() < 1e-7, "{}", b.sigma_w_sq);
        assert!((b.q_star - 0.8057991819).abs() < 1e-7, "{}", b.q_star);
    }

    #[test]
    fn tanh_eoc_self_consistency() {
        let eoc = edge_of_chaos_solve::<f64>(Activation::Tanh, 0.05).unwrap();
        assert!(!eoc.degenerate);
        assert!(eoc.fixed_point_residual < 1e-8, "{}", eoc.fixed_point_residual);
        assert!(eoc.chaos_residual < 1e-8, "{}", eoc.chaos_residual);
        // Independent re-evaluation at a different quadrature order.
        let quad = GaussHermite::<f64>::new(120).unwrap();
        let sq = eoc.q_star.sqrt();
        let chi = eoc.sigma_w_sq
            * quad.expect(|z| {
                let t = (sq * z).tanh();
                let d = 1.0 - t * t;
                d * d
            });
        assert!((chi - 1.0).abs() < 1e-8, "chi = {chi}");
    }
}
