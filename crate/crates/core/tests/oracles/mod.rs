//! Reference computations that share no code with the library.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

/// Gauss–Hermite nodes and weights for `∫ e^{-t²} g(t) dt` by the
/// Golub–Welsch eigenvalue method.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jacobi = DMatrix::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        jacobi[(k, k - 1)] = b;
        jacobi[(k - 1, k)] = b;
    }
    let eig = jacobi.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], std::f64::consts::PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// `E[g(X)]` for `X ~ N(mean, var)`.
pub fn normal_expectation(g: impl Fn(f64) -> f64, mean: f64, var: f64, nodes: &(Vec<f64>, Vec<f64>)) -> f64 {
    let scale = (2.0 * var).sqrt();
    let total: f64 = nodes.0.iter().zip(&nodes.1).map(|(t, w)| w * g(mean + scale * t)).sum();
    total / std::f64::consts::PI.sqrt()
}

/// `E[exp(b0 + b1 X)]` for `X ~ N(m, v)`.
pub fn lognormal_mean(b0: f64, b1: f64, m: f64, v: f64) -> f64 {
    (b0 + b1 * m + 0.5 * b1 * b1 * v).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlmKind {
    PoissonLog,
    BernoulliLogit,
    GammaLog,
}

/// Per-observation log-likelihood (up to constants), its derivative and
/// negative second derivative in `η`.
fn glm_terms(kind: GlmKind, y: f64, eta: f64) -> (f64, f64, f64) {
    match kind {
        GlmKind::PoissonLog => {
            let mu = eta.exp();
            (y * eta - mu, y - mu, mu)
        }
        GlmKind::BernoulliLogit => {
            let p = 1.0 / (1.0 + (-eta).exp());
            let ll = y * eta - (1.0 + eta.exp()).ln();
            (ll, y - p, p * (1.0 - p))
        }
        GlmKind::GammaLog => {
            let r = y * (-eta).exp();
            (-r - eta, r - 1.0, r)
        }
    }
}

/// Maximum-likelihood coefficients by Newton–Raphson with step halving.
pub fn newton_glm(x: &DMatrix<f64>, y: &[f64], kind: GlmKind) -> DVector<f64> {
    let p = x.ncols();
    let loglik = |b: &DVector<f64>| -> f64 {
        let eta = x * b;
        y.iter().zip(eta.iter()).map(|(yi, e)| glm_terms(kind, *yi, *e).0).sum()
    };
    let mut b = DVector::zeros(p);
    if kind == GlmKind::GammaLog || kind == GlmKind::PoissonLog {
        b[0] = (y.iter().sum::<f64>() / y.len() as f64).ln();
    }
    for _ in 0..200 {
        let eta = x * &b;
        let mut grad = DVector::zeros(p);
        let mut info = DMatrix::zeros(p, p);
        for i in 0..y.len() {
            let (_, d, h) = glm_terms(kind, y[i], eta[i]);
            let row = x.row(i).transpose();
            grad += &row * d;
            info += &row * row.transpose() * h;
        }
        let step = info.lu().solve(&grad).expect("information matrix is singular");
        let base = loglik(&b);
        let mut t = 1.0;
        let mut next = &b + &step * t;
        while loglik(&next) < base - 1e-12 && t > 1e-8 {
            t *= 0.5;
            next = &b + &step * t;
        }
        let moved = (&next - &b).amax();
        b = next;
        if moved < 1e-14 {
            break;
        }
    }
    b
}

/// Gaussian-kernel density estimate with Silverman's bandwidth.
pub fn gaussian_kde(data: &[f64], points: &[f64]) -> Vec<f64> {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let sd = (data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let h = 1.06 * sd * n.powf(-0.2);
    let c = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    points
        .iter()
        .map(|&t| c * data.iter().map(|&d| (-0.5 * ((t - d) / h).powi(2)).exp()).sum::<f64>())
        .collect()
}

pub fn normal_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    (-0.5 * ((x - mean) / sd).powi(2)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
}

/// Trapezoid rule on an arbitrary grid.
pub fn trapezoid(x: &[f64], f: &[f64]) -> f64 {
    x.windows(2).zip(f.windows(2)).map(|(a, b)| 0.5 * (a[1] - a[0]) * (b[0] + b[1])).sum()
}

