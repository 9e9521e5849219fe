//! Trainability diagnostics: convergence traces and exponential-rate fits,
//! condition numbers of the train-restricted kernel, closed-form
//! gradient-flow dynamics under MSE, and kernel ridge regression for node
//! classification.

use crate::data::{argmax_rows, DatasetSplit, LabelVector};
use crate::error::{Error, Result};
use crate::kernel::{normalized_stats, MatrixStats, TraceSample};
use crate::linalg::{principal_submatrix, submatrix, symmetric_eigen};
use crate::scalar::Scalar;
use ndarray::Array2;
use serde::Serialize;

/// Per-depth spread statistics of the normalized tangent kernel.
#[derive(Debug, Clone)]
pub struct ConvergenceTrace<T> {
    samples: Vec<TraceSample<T>>,
}

impl<T: Scalar> ConvergenceTrace<T> {
    /// Wrap an engine trace; depths must be strictly increasing.
    pub fn from_samples(samples: Vec<TraceSample<T>>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidParameter("empty trace".into()));
        }
        for w in samples.windows(2) {
            if w[1].depth <= w[0].depth {
                return Err(Error::InvalidParameter(
                    "trace depths must be strictly increasing".into(),
                ));
            }
        }
        Ok(ConvergenceTrace { samples })
    }

    /// Build a trace from explicit per-depth kernels.
    pub fn from_kernels<'a, I>(kernels: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, &'a Array2<T>)>,
    {
        let samples = kernels
            .into_iter()
            .map(|(depth, theta)| TraceSample {
                depth,
                theta: normalized_stats(theta),
                sigma: MatrixStats {
                    min: T::zero(),
                    max: T::zero(),
                    mean: T::zero(),
                    spread: T::zero(),
                },
            })
            .collect();
        Self::from_samples(samples)
    }

    pub fn samples(&self) -> &[TraceSample<T>] {
        &self.samples
    }

    pub fn spread_at(&self, depth: usize) -> Option<T> {
        self.samples
            .iter()
            .find(|s| s.depth == depth)
            .map(|s| s.theta.spread)
    }
}

/// Least-squares fit of `log(spread)` against depth.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RateFit<T> {
    /// Log-spread change per depth unit (negative for decaying kernels).
    pub slope: T,
    pub intercept: T,
    /// Coefficient of determination of the linear fit.
    pub r_squared: T,
    /// Depth range actually used after truncation.
    pub fit_range: (usize, usize),
    pub points_used: usize,
}

/// Spreads below `1e3·ε·mean|Θ̂|` are rounding noise, not signal; the fit
/// range is truncated to exclude them.
fn spread_floor<T: Scalar>(sample: &TraceSample<T>) -> T {
    T::lit(1e3) * T::epsilon() * sample.theta.mean.abs()
}

/// Fit `log(spread)` vs depth on `range` (inclusive; defaults to the full
/// trace). Depths with spread at the noise floor are dropped; at least 10
/// usable points are required.
pub fn fit_rate<T: Scalar>(
    trace: &ConvergenceTrace<T>,
    range: Option<(usize, usize)>,
) -> Result<RateFit<T>> {
    let (lo, hi) = range.unwrap_or_else(|| {
        let s = trace.samples();
        (s[0].depth, s[s.len() - 1].depth)
    });
    let pts: Vec<(usize, T)> = trace
        .samples()
        .iter()
        .filter(|s| s.depth >= lo && s.depth <= hi)
        .filter(|s| s.theta.spread > spread_floor(s) && s.theta.spread > T::zero())
        .map(|s| (s.depth, s.theta.spread.ln()))
        .collect();
    if pts.len() < 10 {
        return Err(Error::InvalidParameter(format!(
            "only {} positive-spread points in [{lo}, {hi}]; need >= 10",
            pts.len()
        )));
    }
    let n = T::from_count(pts.len());
    let sx: T = pts.iter().map(|&(d, _)| T::from_count(d)).sum();
    let sy: T = pts.iter().map(|&(_, y)| y).sum();
    let sxx: T = pts.iter().map(|&(d, _)| T::from_count(d) * T::from_count(d)).sum();
    let sxy: T = pts.iter().map(|&(d, y)| T::from_count(d) * y).sum();
    let denom = n * sxx - sx * sx;
    if denom == T::zero() {
        return Err(Error::Numerical("degenerate fit: constant depth".into()));
    }
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;
    let mean_y = sy / n;
    let mut ss_res = T::zero();
    let mut ss_tot = T::zero();
    for &(d, y) in &pts {
        let pred = slope * T::from_count(d) + intercept;
        ss_res += (y - pred) * (y - pred);
        ss_tot += (y - mean_y) * (y - mean_y);
    }
    let r_squared = if ss_tot > T::zero() {
        (T::one() - ss_res / ss_tot).max(T::zero())
    } else {
        T::one()
    };
    Ok(RateFit {
        slope,
        intercept,
        r_squared,
        fit_range: (pts[0].0, pts[pts.len() - 1].0),
        points_used: pts.len(),
    })
}

/// Condition diagnostics of a kernel restricted to an index set.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ConditionReport<T> {
    pub lambda_min: T,
    pub lambda_max: T,
    /// `λmax / max(λmin, floor)` with a 1e-300 floor sentinel.
    pub kappa: T,
    /// Set when `λmin < 1e-10·λmax`: the restricted kernel is numerically
    /// singular and `kappa` is saturated.
    pub singular: bool,
}

pub fn condition_number<T: Scalar>(
    theta: &Array2<T>,
    indices: &[usize],
) -> Result<ConditionReport<T>> {
    if indices.is_empty() {
        return Err(Error::InvalidParameter("empty index set".into()));
    }
    let block = principal_submatrix(theta, indices);
    let eigen = symmetric_eigen(&block)?;
    let k = eigen.values.len();
    let lambda_min = eigen.values[0];
    let lambda_max = eigen.values[k - 1];
    let singular = lambda_min < T::lit(1e-10) * lambda_max;
    let kappa = lambda_max / lambda_min.max(T::lit(1e-300));
    Ok(ConditionReport {
        lambda_min,
        lambda_max,
        kappa,
        singular,
    })
}

/// Closed-form gradient-flow trajectory under MSE from `f₀ = 0`.
#[derive(Debug, Clone)]
pub struct DynamicsResult<T> {
    pub times: Vec<T>,
    /// Frobenius residual `‖f_t - Y‖` on the train block per time point.
    pub residuals: Vec<T>,
    /// Train predictions at the final time point.
    pub train_predictions: Array2<T>,
    /// Test predictions at the final time point.
    pub test_predictions: Array2<T>,
    pub eta: T,
}

/// Eigenvalues below `1e-10·λmax` are treated as exact zeros: those modes
/// never move under gradient flow and are pseudo-inverted away in the test
/// projection.
pub fn simulate_dynamics<T: Scalar>(
    theta: &Array2<T>,
    labels: &LabelVector,
    split: &DatasetSplit,
    eta: T,
    times: &[T],
) -> Result<DynamicsResult<T>> {
    if split.train.is_empty() {
        return Err(Error::InvalidParameter("empty train split".into()));
    }
    if eta <= T::zero() {
        return Err(Error::InvalidParameter(format!(
            "learning rate must be positive, got {eta}"
        )));
    }
    let y_train: Array2<T> = labels.one_hot(&split.train)?;
    let block = principal_submatrix(theta, &split.train);
    let eigen = symmetric_eigen(&block)?;
    let k = eigen.values.len();
    let lambda_max = eigen.values[k - 1].max(T::zero());
    if eigen.values[0] < -T::lit(1e-8) * lambda_max.max(T::one()) {
        return Err(Error::Numerical(format!(
            "train block is not PSD: min eigenvalue {}",
            eigen.values[0]
        )));
    }
    let zero_floor = T::lit(1e-10) * lambda_max;
    let evals: Vec<T> = eigen
        .values
        .iter()
        .map(|&v| if v < zero_floor { T::zero() } else { v })
        .collect();
    // Spectral coordinates of the labels: B = Qᵀ Y.
    let b = eigen.vectors.t().dot(&y_train);
    let mut residuals = Vec::with_capacity(times.len());
    for &t in times {
        if t < T::zero() {
            return Err(Error::InvalidParameter("negative time".into()));
        }
        let mut acc = T::zero();
        for (i, &lam) in evals.iter().enumerate() {
            let decay = (-eta * lam * t).exp();
            for c in 0..b.ncols() {
                let term = decay * b[(i, c)];
                acc += term * term;
            }
        }
        residuals.push(acc.sqrt());
    }
    let t_last = *times.last().ok_or_else(|| {
        Error::InvalidParameter("empty time grid".into())
    })?;
    // f_t(train) = Q (I - e^{-ηΛt}) Qᵀ Y.
    let mut filtered = b.clone();
    for (i, &lam) in evals.iter().enumerate() {
        let gain = T::one() - (-eta * lam * t_last).exp();
        for c in 0..filtered.ncols() {
            filtered[(i, c)] *= gain;
        }
    }
    let train_predictions = eigen.vectors.dot(&filtered);
    // f_t(test) = Θ_te,tr Q Λ⁺ (I - e^{-ηΛt}) Qᵀ Y.
    let mut propagated = b;
    for (i, &lam) in evals.iter().enumerate() {
        let gain = if lam > T::zero() {
            (T::one() - (-eta * lam * t_last).exp()) / lam
        } else {
            T::zero()
        };
        for c in 0..propagated.ncols() {
            propagated[(i, c)] *= gain;
        }
    }
    let cross = submatrix(theta, &split.test, &split.train);
    let test_predictions = cross.dot(&eigen.vectors).dot(&propagated);
    Ok(DynamicsResult {
        times: times.to_vec(),
        residuals,
        train_predictions,
        test_predictions,
        eta,
    })
}

/// Kernel ridge regression outcome.
#[derive(Debug, Clone)]
pub struct RegressionOutcome<T> {
    /// Predicted class per test node (aligned with the split's test order).
    pub test_predictions: Vec<usize>,
    pub test_accuracy: f64,
    pub train_predictions: Vec<usize>,
    pub train_accuracy: f64,
    pub ridge: T,
    pub condition: ConditionReport<T>,
}

/// One-hot kernel regression: `α = (Θ_tr + εI)⁻¹ Y_tr`, decode by argmax of
/// `Θ_·,tr α`. The default ridge is `1e-6·trace(Θ_tr)/n_tr`. All classes
/// share one eigendecomposition of the train block.
pub fn kernel_regression<T: Scalar>(
    theta: &Array2<T>,
    labels: &LabelVector,
    split: &DatasetSplit,
    ridge: Option<T>,
) -> Result<RegressionOutcome<T>> {
    if split.train.is_empty() {
        return Err(Error::InvalidParameter("empty train split".into()));
    }
    let n_train = split.train.len();
    let y_train: Array2<T> = labels.one_hot(&split.train)?;
    let block = principal_submatrix(theta, &split.train);
    let condition = condition_number(theta, &split.train)?;
    let ridge = match ridge {
        Some(r) if r >= T::zero() => r,
        Some(r) => {
            return Err(Error::InvalidParameter(format!(
                "ridge must be nonnegative, got {r}"
            )))
        }
        None => T::lit(1e-6) * block.diag().sum() / T::from_count(n_train),
    };
    let eigen = symmetric_eigen(&block)?;
    let floor = eigen.values[0] + ridge;
    if floor <= T::zero() {
        return Err(Error::Numerical(format!(
            "train block singular after ridge (min eigenvalue {}, kappa {:e})",
            floor,
            condition.kappa.as_f64()
        )));
    }
    // α = Q (Λ+εI)⁻¹ Qᵀ Y.
    let mut b = eigen.vectors.t().dot(&y_train);
    for (i, &lam) in eigen.values.iter().enumerate() {
        let inv = T::one() / (lam + ridge);
        for c in 0..b.ncols() {
            b[(i, c)] *= inv;
        }
    }
    let alpha = eigen.vectors.dot(&b);
    let train_scores = block.dot(&alpha);
    let train_predictions = argmax_rows(&train_scores);
    let train_accuracy = labels.accuracy(&split.train, &train_predictions);
    let (test_predictions, test_accuracy) = if split.test.is_empty() {
        (Vec::new(), 0.0)
    } else {
        let cross = submatrix(theta, &split.test, &split.train);
        let scores = cross.dot(&alpha);
        let preds = argmax_rows(&scores);
        let acc = labels.accuracy(&split.test, &preds);
        (preds, acc)
    };
    Ok(RegressionOutcome {
        test_predictions,
        test_accuracy,
        train_predictions,
        train_accuracy,
        ridge,
        condition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::TraceSample;
    use ndarray::Array2;

    fn synthetic_trace(rate: f64, depths: std::ops::Range<usize>) -> ConvergenceTrace<f64> {
        let samples: Vec<TraceSample<f64>> = depths
            .map(|d| TraceSample {
                depth: d,
                theta: MatrixStats {
                    min: 0.0,
                    max: (rate * d as f64).exp(),
                    mean: 1.0,
                    spread: (rate * d as f64).exp(),
                },
                sigma: MatrixStats {
                    min: 0.0,
                    max: 0.0,
                    mean: 0.0,
                    spread: 0.0,
                },
            })
            .collect();
        ConvergenceTrace::from_samples(samples).unwrap()
    }

    #[test]
    fn exact_exponential_recovers_slope() {
        let trace = synthetic_trace(-0.15, 1..120);
        let fit = fit_rate(&trace, None).unwrap();
        assert!((fit.slope + 0.15).abs() < 1e-12, "slope {}", fit.slope);
        assert!((fit.r_squared - 1.0).abs() < 1e-9);
    }

    #[test]
    fn noise_floor_truncates_fit() {
        // Spread underflows past depth ~230 for rate -0.15 with mean 1;
        // points below 1e3·eps are excluded automatically.
        let trace = synthetic_trace(-0.15, 1..400);
        let fit = fit_rate(&trace, None).unwrap();
        assert!(fit.fit_range.1 < 400);
        assert!((fit.slope + 0.15).abs() < 1e-10);
    }

    #[test]
    fn too_few_points_is_an_error() {
        let trace = synthetic_trace(-0.15, 1..8);
        assert!(fit_rate(&trace, None).is_err());
    }

    #[test]
    fn condition_of_identity_is_one() {
        let theta: Array2<f64> = Array2::eye(6);
        let r = condition_number(&theta, &[0, 2, 4]).unwrap();
        assert!((r.kappa - 1.0).abs() < 1e-12);
        assert!(!r.singular);
    }

    #[test]
    fn ones_matrix_is_flagged_singular() {
        let theta: Array2<f64> = Array2::from_elem((5, 5), 1.0);
        let r = condition_number(&theta, &[0, 1, 2, 3]).unwrap();
        assert!(r.singular);
        assert!(r.kappa > 1e10);
    }

    fn two_class_setup(n: usize) -> (LabelVector, DatasetSplit) {
        let labels = LabelVector::from_classes((0..n).map(|u| u % 2), 2).unwrap();
        let train: Vec<usize> = (0..n / 2).collect();
        let test: Vec<usize> = (n / 2..n).collect();
        let split = DatasetSplit::new(train, Vec::new(), test, n).unwrap();
        (labels, split)
    }

    #[test]
    fn dynamics_at_zero_time_has_full_residual() {
        let (labels, split) = two_class_setup(8);
        let theta: Array2<f64> = Array2::eye(8);
        let d = simulate_dynamics(&theta, &labels, &split, 1.0, &[0.0, 1e6]).unwrap();
        // ‖Y_tr‖_F = sqrt(n_train) for one-hot labels.
        assert!((d.residuals[0] - 2.0).abs() < 1e-12);
        // Nonsingular kernel: residual -> 0 and train predictions -> Y.
        assert!(d.residuals[1] < 1e-12);
        for (row, &node) in split.train.iter().enumerate() {
            let class = labels.class(node).unwrap();
            assert!((d.train_predictions[(row, class)] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn dynamics_residual_is_non_increasing() {
        let (labels, split) = two_class_setup(10);
        // PSD random kernel.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let b = Array2::from_shape_fn((10, 6), |_| rng.random::<f64>() - 0.3);
        let theta = b.dot(&b.t());
        let times: Vec<f64> = (0..30).map(|k| k as f64 * 0.37).collect();
        let d = simulate_dynamics(&theta, &labels, &split, 0.8, &times).unwrap();
        for w in d.residuals.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "residual increased: {w:?}");
        }
    }

    #[test]
    fn singular_kernel_keeps_positive_residual() {
        // Θ_tr = ones is rank one; for non-constant labels the residual is
        // bounded below by the projection of Y onto the null space.
        let (labels, split) = two_class_setup(8);
        let theta: Array2<f64> = Array2::from_elem((8, 8), 1.0);
        let y: Array2<f64> = labels.one_hot(&split.train).unwrap();
        // Null space of ones/n on 4 train nodes: complement of the constant
        // vector; projection norm² = ‖Y‖² - ‖mean row‖²·n.
        let n_tr = split.train.len() as f64;
        let col_means: Vec<f64> = (0..y.ncols())
            .map(|c| y.column(c).sum() / n_tr)
            .collect();
        let mut null_norm_sq = 0.0;
        for r in 0..y.nrows() {
            for c in 0..y.ncols() {
                let centered: f64 = y[(r, c)] - col_means[c];
                null_norm_sq += centered * centered;
            }
        }
        let bound = null_norm_sq.sqrt();
        assert!(bound > 0.5);
        let times: Vec<f64> = vec![0.0, 1.0, 10.0, 1e3, 1e6, 1e9];
        let d = simulate_dynamics(&theta, &labels, &split, 1.0, &times).unwrap();
        for &r in &d.residuals {
            assert!(r >= bound * (1.0 - 1e-9), "residual {r} below bound {bound}");
        }
    }

    #[test]
    fn identity_kernel_regression_has_perfect_train_accuracy() {
        let (labels, split) = two_class_setup(8);
        let theta: Array2<f64> = Array2::eye(8);
        let out = kernel_regression(&theta, &labels, &split, Some(0.0)).unwrap();
        assert_eq!(out.train_accuracy, 1.0);
        // Identity kernel carries no train-test coupling.
        assert!((out.condition.kappa - 1.0).abs() < 1e-12);
    }

    #[test]
    fn regression_agrees_with_late_time_dynamics() {
        use rand::{Rng, SeedableRng};
        let (labels, split) = two_class_setup(12);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let b = Array2::from_shape_fn((12, 12), |_| rng.random::<f64>() - 0.5);
        let theta = b.dot(&b.t()) + Array2::<f64>::eye(12); // well-conditioned
        let eta = 0.5;
        let d = simulate_dynamics(&theta, &labels, &split, eta, &[1e6 / eta]).unwrap();
        let y: Array2<f64> = labels.one_hot(&split.train).unwrap();
        // ε -> 0 regression solves the same interpolation problem.
        let out = kernel_regression(&theta, &labels, &split, Some(0.0)).unwrap();
        let _ = out;
        for (row, _) in split.train.iter().enumerate() {
            for c in 0..2 {
                assert!(
                    (d.train_predictions[(row, c)] - y[(row, c)]).abs() < 1e-6,
                    "late-time train prediction differs from label fit"
                );
            }
        }
    }

    #[test]
    fn empty_train_split_rejected() {
        let labels = LabelVector::from_classes([0, 1], 2).unwrap();
        let split = DatasetSplit::new(vec![], vec![], vec![0, 1], 2).unwrap();
        let theta: Array2<f64> = Array2::eye(2);
        assert!(kernel_regression(&theta, &labels, &split, None).is_err());
        assert!(simulate_dynamics(&theta, &labels, &split, 1.0, &[0.0]).is_err());
    }
}
