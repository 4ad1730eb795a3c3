//! Small dense helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{OsmeeError, Result};

/// Symmetric eigen-decomposition with eigenvalues sorted in decreasing order.
pub fn sym_eigen_desc(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Cholesky factorization; on failure retries with a diagonal jitter scaled
/// to the mean diagonal, returning whether the jitter was needed.
pub fn cholesky_with_jitter(a: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, bool)> {
    if let Some(c) = Cholesky::new(a.clone()) {
        return Ok((c, false));
    }
    let n = a.nrows();
    let scale = (a.trace() / n.max(1) as f64).abs().max(1.0);
    let mut jitter = 1e-10 * scale;
    for _ in 0..8 {
        let mut b = a.clone();
        for i in 0..n {
            b[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(b) {
            return Ok((c, true));
        }
        jitter *= 100.0;
    }
    Err(OsmeeError::Numerical(
        "matrix is not positive definite even after jitter".into(),
    ))
}

/// log-determinant from a Cholesky factor.
pub fn chol_logdet(c: &Cholesky<f64, Dyn>) -> f64 {
    let l = c.l_dirty();
    (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
}

/// Mᵀ diag(w) M.
pub fn weighted_gram(m: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let mut scaled = m.clone();
    for (i, &wi) in w.iter().enumerate() {
        let s = wi.sqrt();
        for j in 0..m.ncols() {
            scaled[(i, j)] *= s;
        }
    }
    scaled.tr_mul(&scaled)
}

/// Mᵀ diag(w) y.
pub fn weighted_cross(m: &DMatrix<f64>, w: &[f64], y: &[f64]) -> DVector<f64> {
    let wy = DVector::from_iterator(y.len(), y.iter().zip(w).map(|(a, b)| a * b));
    m.tr_mul(&wy)
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample variance with the n−1 denominator.
pub fn sample_variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

pub fn median(x: &[f64]) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Linear-interpolation quantile of sorted data (type 7).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Evenly spaced grid with both endpoints.
pub fn linspace(a: f64, b: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![a];
    }
    let step = (b - a) / (count - 1) as f64;
    (0..count)
        .map(|i| if i == count - 1 { b } else { a + step * i as f64 })
        .collect()
}
