//! Small dense symmetric linear algebra: a cyclic Jacobi eigensolver and a
//! few matrix helpers. Every matrix this crate decomposes is symmetric and
//! modest in size (a few hundred rows), where Jacobi is simple, accurate to
//! machine precision, and keeps the crate scalar-generic.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2};

/// Eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEigen<T> {
    /// Eigenvalues in ascending order.
    pub values: Array1<T>,
    /// Orthonormal eigenvectors as columns, matching `values`.
    pub vectors: Array2<T>,
}

/// Cyclic Jacobi eigendecomposition. The input must be square and symmetric
/// to within roundoff; only the upper triangle is read.
pub fn symmetric_eigen<T: Scalar>(matrix: &Array2<T>) -> Result<SymEigen<T>> {
    let n = matrix.nrows();
    if matrix.ncols() != n {
        return Err(Error::Dimension(format!(
            "expected square matrix, got {}x{}",
            n,
            matrix.ncols()
        )));
    }
    if n == 0 {
        return Err(Error::Dimension("empty matrix".into()));
    }
    let mut a = matrix.clone();
    // Work on an exactly symmetric copy.
    for i in 0..n {
        for j in (i + 1)..n {
            let m = (a[(i, j)] + a[(j, i)]) / T::lit(2.0);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
    let mut v: Array2<T> = Array2::eye(n);
    let eps = T::epsilon();
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = T::zero();
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        let norm = a.iter().map(|&x| x * x).sum::<T>().sqrt();
        if off.sqrt() <= eps * norm.max(T::min_positive_value()) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                // Skip rotations that cannot change anything at this scale.
                if apq.abs() <= eps * (app.abs() + aqq.abs()) * T::lit(0.5e-2) {
                    continue;
                }
                let theta = (aqq - app) / (T::lit(2.0) * apq);
                let t = {
                    let sign = if theta >= T::zero() { T::one() } else { -T::one() };
                    sign / (theta.abs() + (theta * theta + T::one()).sqrt())
                };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<T> = (0..n).map(|i| a[(i, i)]).collect();
    order.sort_by(|&i, &j| diag[i].partial_cmp(&diag[j]).expect("NaN eigenvalue"));
    let values = Array1::from_iter(order.iter().map(|&i| diag[i]));
    let mut vectors = Array2::zeros((n, n));
    for (col, &src) in order.iter().enumerate() {
        for row in 0..n {
            vectors[(row, col)] = v[(row, src)];
        }
    }
    Ok(SymEigen { values, vectors })
}

/// Eigenvalues only, ascending.
pub fn symmetric_eigenvalues<T: Scalar>(matrix: &Array2<T>) -> Result<Array1<T>> {
    symmetric_eigen(matrix).map(|e| e.values)
}

/// Principal submatrix on the given (sorted or unsorted) indices.
pub fn principal_submatrix<T: Scalar>(matrix: &Array2<T>, indices: &[usize]) -> Array2<T> {
    let k = indices.len();
    let mut out = Array2::zeros((k, k));
    for (i, &a) in indices.iter().enumerate() {
        for (j, &b) in indices.iter().enumerate() {
            out[(i, j)] = matrix[(a, b)];
        }
    }
    out
}

/// Rectangular block `matrix[rows, cols]`.
pub fn submatrix<T: Scalar>(matrix: &Array2<T>, rows: &[usize], cols: &[usize]) -> Array2<T> {
    let mut out = Array2::zeros((rows.len(), cols.len()));
    for (i, &a) in rows.iter().enumerate() {
        for (j, &b) in cols.iter().enumerate() {
            out[(i, j)] = matrix[(a, b)];
        }
    }
    out
}

pub fn frobenius_norm<T: Scalar>(matrix: &Array2<T>) -> T {
    matrix.iter().map(|&x| x * x).sum::<T>().sqrt()
}

pub fn max_abs_diff<T: Scalar>(a: &Array2<T>, b: &Array2<T>) -> T {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs())
        .fold(T::zero(), T::max)
}

/// Largest |a[i,j] - a[j,i]|, zero for exactly symmetric input.
pub fn symmetry_defect<T: Scalar>(a: &Array2<T>) -> T {
    let n = a.nrows();
    let mut worst = T::zero();
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}
