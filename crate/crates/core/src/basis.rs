//! Spline bases split into unpenalized (`X`) and penalized (`Z`) columns.
//!
//! Every supported basis is a piecewise cubic in `x` between its
//! breakpoints, and all of them are extended linearly outside the
//! construction range. A design therefore keeps two evaluation paths:
//! the exact per-kind evaluator behind [`BasisDesign::evaluate`] and
//! [`BasisDesign::penalty_matrix`], and precomputed cubic pieces in the
//! fitting parametrization used by [`BasisDesign::model_row`]. The fitting
//! parametrization moves any penalty null space into the `[1, x]` columns
//! so the penalized block has a full-rank penalty.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, Matrix4};

use crate::error::{OsmeeError, Result};
use crate::linalg::{quantile_sorted, sym_eigen_desc};

pub const DEFAULT_BASIS_DIM: usize = 40;
/// Largest number of distinct centers used by the thin-plate eigen-construction.
pub const THIN_PLATE_MAX_KNOTS: usize = 200;

const NULL_EIGEN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BasisType {
    TruncatedLinear,
    ThinPlate,
    CubicRegression,
    PSpline,
}

impl BasisType {
    pub fn short_name(self) -> &'static str {
        match self {
            BasisType::TruncatedLinear => "tr",
            BasisType::ThinPlate => "tp",
            BasisType::CubicRegression => "cr",
            BasisType::PSpline => "ps",
        }
    }

    pub fn min_dim(self) -> usize {
        match self {
            BasisType::TruncatedLinear => 1,
            _ => 4,
        }
    }
}

impl FromStr for BasisType {
    type Err = OsmeeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tr" | "truncated_linear" | "truncated" => Ok(BasisType::TruncatedLinear),
            "tp" | "thin_plate" | "tprs" => Ok(BasisType::ThinPlate),
            "cr" | "cubic_regression" => Ok(BasisType::CubicRegression),
            "ps" | "p_spline" | "pspline" => Ok(BasisType::PSpline),
            _ => Err(OsmeeError::UnknownIdentifier(s.to_string())),
        }
    }
}

impl fmt::Display for BasisType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BasisKind {
    pub basis: BasisType,
    /// Number of knots for truncated lines, total basis dimension otherwise.
    pub dim: usize,
}

impl BasisKind {
    pub fn new(basis: BasisType, dim: usize) -> Self {
        Self { basis, dim }
    }
}

impl Default for BasisKind {
    fn default() -> Self {
        Self::new(BasisType::ThinPlate, DEFAULT_BASIS_DIM)
    }
}

/// Raw basis rows at a set of points together with the raw penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisExpansion {
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub penalty: DMatrix<f64>,
}

#[derive(Debug, Clone)]
enum RawBasis {
    TruncatedLinear { knots: Vec<f64> },
    PSpline { knots: Vec<f64> },
    CubicRegression { knots: Vec<f64>, f: DMatrix<f64> },
    ThinPlate { centers: Vec<f64>, proj: DMatrix<f64> },
}

impl RawBasis {
    fn n_penalized(&self) -> usize {
        match self {
            RawBasis::TruncatedLinear { knots } => knots.len(),
            RawBasis::PSpline { knots } => knots.len() - 4,
            RawBasis::CubicRegression { knots, .. } => knots.len(),
            RawBasis::ThinPlate { proj, .. } => proj.ncols(),
        }
    }

    /// Writes `[1, x, z...]` for a point inside the construction range.
    fn row_inside(&self, x: f64, out: &mut [f64]) {
        out[0] = 1.0;
        out[1] = x;
        let z = &mut out[2..];
        match self {
            RawBasis::TruncatedLinear { knots } => {
                for (zj, k) in z.iter_mut().zip(knots) {
                    *zj = (x - k).max(0.0);
                }
            }
            RawBasis::PSpline { knots } => {
                z.iter_mut().for_each(|v| *v = 0.0);
                let nb = knots.len() - 4;
                // span index mu with t[mu] <= x < t[mu+1], restricted to the range
                let mut mu = knots.partition_point(|&t| t <= x).saturating_sub(1);
                mu = mu.clamp(3, nb - 1);
                let vals = bspline_cubic(knots, mu, x);
                for (r, v) in vals.iter().enumerate() {
                    z[mu - 3 + r] = *v;
                }
            }
            RawBasis::CubicRegression { knots, f } => {
                let k = knots.len();
                let j = knots
                    .partition_point(|&t| t <= x)
                    .saturating_sub(1)
                    .min(k - 2);
                let h = knots[j + 1] - knots[j];
                let am = (knots[j + 1] - x) / h;
                let ap = (x - knots[j]) / h;
                let dm = knots[j + 1] - x;
                let dp = x - knots[j];
                let cm = (dm * dm * dm / h - h * dm) / 6.0;
                let cp = (dp * dp * dp / h - h * dp) / 6.0;
                for (c, zc) in z.iter_mut().enumerate() {
                    *zc = cm * f[(j, c)] + cp * f[(j + 1, c)];
                }
                z[j] += am;
                z[j + 1] += ap;
            }
            RawBasis::ThinPlate { centers, proj } => {
                z.iter_mut().for_each(|v| *v = 0.0);
                for (i, c) in centers.iter().enumerate() {
                    let e = tps_radial(x - c);
                    for (col, zc) in z.iter_mut().enumerate() {
                        *zc += e * proj[(i, col)];
                    }
                }
            }
        }
    }
}

fn tps_radial(r: f64) -> f64 {
    let a = r.abs();
    a * a * a / 12.0
}

/// Nonzero cubic B-splines `B_{mu-3..=mu}` at `x` (Cox–de Boor).
fn bspline_cubic(t: &[f64], mu: usize, x: f64) -> [f64; 4] {
    let mut n = [0.0; 4];
    let mut left = [0.0; 4];
    let mut right = [0.0; 4];
    n[0] = 1.0;
    for j in 1..=3 {
        left[j] = x - t[mu + 1 - j];
        right[j] = t[mu + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = n[r] / (right[r + 1] + left[j - r]);
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    n
}

/// A fitted spline basis: construction data, raw penalty and the fitting
/// parametrization.
#[derive(Debug, Clone)]
pub struct BasisDesign {
    kind: BasisKind,
    raw: RawBasis,
    range: (f64, f64),
    knots: Vec<f64>,
    penalty: DMatrix<f64>,
    fit_map: DMatrix<f64>,
    fit_penalty: DMatrix<f64>,
    slope_lo: Vec<f64>,
    slope_hi: Vec<f64>,
    breaks: Vec<f64>,
    /// Cubic coefficients per piece: left extension, interior intervals,
    /// right extension; each piece holds `4 * n_coef` values.
    pieces: Vec<f64>,
}

fn sorted_unique(points: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = points.iter().find(|v| !v.is_finite()) {
        return Err(OsmeeError::InvalidArgument(format!(
            "construction point {bad} is not finite"
        )));
    }
    let mut v = points.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v.dedup();
    Ok(v)
}

fn quantile_knots(unique: &[f64], probs: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut k: Vec<f64> = probs.map(|p| quantile_sorted(unique, p)).collect();
    k.dedup();
    k
}

fn vandermonde_inverse() -> Matrix4<f64> {
    let s: [f64; 4] = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
    let v = Matrix4::from_fn(|r, c| s[r].powi(c as i32));
    v.try_inverse().expect("Vandermonde on distinct nodes is invertible")
}

impl BasisDesign {
    /// Builds a basis from construction points (usually the observed predictor).
    pub fn build(kind: BasisKind, points: &[f64]) -> Result<Self> {
        let unique = sorted_unique(points)?;
        if unique.len() < 2 {
            return Err(OsmeeError::DegenerateInput);
        }
        if kind.dim < kind.basis.min_dim() {
            return Err(OsmeeError::InvalidArgument(format!(
                "basis dimension {} is below the minimum {} for {}",
                kind.dim,
                kind.basis.min_dim(),
                kind.basis
            )));
        }
        if unique.len() < kind.dim {
            return Err(OsmeeError::TooFewPoints {
                needed: kind.dim,
                got: unique.len(),
            });
        }
        let lo = unique[0];
        let hi = *unique.last().unwrap();
        let k = kind.dim;

        let (raw, knots, penalty, breaks) = match kind.basis {
            BasisType::TruncatedLinear => {
                let knots =
                    quantile_knots(&unique, (1..=k).map(|j| j as f64 / (k + 1) as f64));
                let penalty = DMatrix::identity(knots.len(), knots.len());
                let mut breaks = vec![lo];
                breaks.extend(knots.iter().copied().filter(|&v| v > lo && v < hi));
                breaks.push(hi);
                (RawBasis::TruncatedLinear { knots: knots.clone() }, knots, penalty, breaks)
            }
            BasisType::PSpline => {
                let h = (hi - lo) / (k - 3) as f64;
                let full: Vec<f64> = (0..k + 4)
                    .map(|j| {
                        if j == 3 {
                            lo
                        } else if j == k {
                            hi
                        } else {
                            lo + (j as f64 - 3.0) * h
                        }
                    })
                    .collect();
                let mut d = DMatrix::zeros(k - 2, k);
                for r in 0..k - 2 {
                    d[(r, r)] = 1.0;
                    d[(r, r + 1)] = -2.0;
                    d[(r, r + 2)] = 1.0;
                }
                let penalty = d.tr_mul(&d);
                let breaks = full[3..=k].to_vec();
                (RawBasis::PSpline { knots: full.clone() }, full, penalty, breaks)
            }
            BasisType::CubicRegression => {
                let knots = quantile_knots(&unique, (0..k).map(|j| j as f64 / (k - 1) as f64));
                if knots.len() < 3 {
                    return Err(OsmeeError::TooFewPoints {
                        needed: 3,
                        got: knots.len(),
                    });
                }
                let (f, penalty) = cubic_regression_matrices(&knots)?;
                (
                    RawBasis::CubicRegression {
                        knots: knots.clone(),
                        f,
                    },
                    knots.clone(),
                    penalty,
                    knots,
                )
            }
            BasisType::ThinPlate => {
                let centers = if unique.len() > THIN_PLATE_MAX_KNOTS {
                    let m = THIN_PLATE_MAX_KNOTS;
                    let mut c: Vec<f64> = (0..m)
                        .map(|j| unique[(j * (unique.len() - 1) + (m - 1) / 2) / (m - 1)])
                        .collect();
                    c[0] = lo;
                    c[m - 1] = hi;
                    c.dedup();
                    c
                } else {
                    unique.clone()
                };
                let (proj, penalty) = thin_plate_matrices(&centers, k)?;
                (
                    RawBasis::ThinPlate {
                        centers: centers.clone(),
                        proj,
                    },
                    centers.clone(),
                    penalty,
                    centers,
                )
            }
        };

        let mut design = BasisDesign {
            kind,
            raw,
            range: (lo, hi),
            knots,
            penalty,
            fit_map: DMatrix::zeros(0, 0),
            fit_penalty: DMatrix::zeros(0, 0),
            slope_lo: Vec::new(),
            slope_hi: Vec::new(),
            breaks,
            pieces: Vec::new(),
        };
        design.build_fit_parametrization(points)?;
        Ok(design)
    }

    fn build_fit_parametrization(&mut self, points: &[f64]) -> Result<()> {
        let q_raw = self.raw.n_penalized();
        let (vals, vecs) = sym_eigen_desc(&self.penalty);
        let top = vals[0].max(0.0);
        let tol = NULL_EIGEN_TOL * top;
        let range_idx: Vec<usize> = (0..q_raw).filter(|&i| vals[i] > tol).collect();
        let drops_null = matches!(
            self.kind.basis,
            BasisType::PSpline | BasisType::CubicRegression
        );
        let (fit_map, fit_penalty) = if drops_null {
            if q_raw - range_idx.len() != 2 {
                return Err(OsmeeError::Numerical(format!(
                    "expected a two-dimensional penalty null space, found {}",
                    q_raw - range_idx.len()
                )));
            }
            let mut t = DMatrix::zeros(q_raw, range_idx.len());
            let mut s = DMatrix::zeros(range_idx.len(), range_idx.len());
            for (c, &i) in range_idx.iter().enumerate() {
                t.set_column(c, &vecs.column(i));
                s[(c, c)] = vals[i];
            }
            (t, s)
        } else {
            let clamped = DMatrix::from_diagonal(&vals.map(|v| v.max(0.0)));
            let s = &vecs * clamped * vecs.transpose();
            (DMatrix::identity(q_raw, q_raw), (&s + s.transpose()) * 0.5)
        };
        self.fit_map = fit_map;
        self.fit_penalty = fit_penalty;

        self.build_pieces();

        // scale the fitting penalty to the data so one λ grid suits every basis
        let z = self.model_matrix(points);
        let zq = z.columns(2, z.ncols() - 2);
        let data_trace: f64 = zq.iter().map(|v| v * v).sum();
        let pen_trace = self.fit_penalty.trace();
        if pen_trace > 0.0 && data_trace > 0.0 {
            self.fit_penalty *= data_trace / pen_trace;
        }
        Ok(())
    }

    fn raw_width(&self) -> usize {
        2 + self.raw.n_penalized()
    }

    fn raw_to_fit(&self, raw: &[f64], out: &mut [f64]) {
        out[0] = raw[0];
        out[1] = raw[1];
        let z = &raw[2..];
        for (c, o) in out[2..].iter_mut().enumerate() {
            let col = self.fit_map.column(c);
            *o = z.iter().zip(col.iter()).map(|(a, b)| a * b).sum();
        }
    }

    fn build_pieces(&mut self) {
        let rw = self.raw_width();
        let p = 2 + self.fit_map.ncols();
        let vinv = vandermonde_inverse();
        let m = self.breaks.len() - 1;
        let mut raw_pieces = vec![0.0; m * 4 * rw];
        let mut buf = vec![0.0; rw];
        for j in 0..m {
            let a = self.breaks[j];
            let h = self.breaks[j + 1] - a;
            let mut samples = [[0.0; 4]; 0].to_vec();
            samples.resize(rw, [0.0; 4]);
            for (r, s) in [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0].iter().enumerate() {
                let x = if r == 3 { self.breaks[j + 1] } else { a + s * h };
                self.raw.row_inside(x, &mut buf);
                for c in 0..rw {
                    samples[c][r] = buf[c];
                }
            }
            for c in 0..rw {
                let mut hp = 1.0;
                for d in 0..4 {
                    let coef: f64 = (0..4).map(|r| vinv[(d, r)] * samples[c][r]).sum();
                    raw_pieces[(j * 4 + d) * rw + c] = coef / hp;
                    hp *= h;
                }
            }
        }
        // edge slopes from the boundary cubic pieces
        self.slope_lo = (0..rw).map(|c| raw_pieces[rw + c]).collect();
        let h_last = self.breaks[m] - self.breaks[m - 1];
        let base = (m - 1) * 4 * rw;
        self.slope_hi = (0..rw)
            .map(|c| {
                raw_pieces[base + rw + c]
                    + 2.0 * raw_pieces[base + 2 * rw + c] * h_last
                    + 3.0 * raw_pieces[base + 3 * rw + c] * h_last * h_last
            })
            .collect();

        let mut pieces = vec![0.0; (m + 2) * 4 * p];
        let mut tmp = vec![0.0; p];
        let mut value = vec![0.0; rw];
        // left extension
        self.raw.row_inside(self.range.0, &mut value);
        self.raw_to_fit(&value, &mut tmp);
        pieces[..p].copy_from_slice(&tmp);
        self.raw_to_fit(&self.slope_lo.clone(), &mut tmp);
        pieces[p..2 * p].copy_from_slice(&tmp);
        for j in 0..m {
            for d in 0..4 {
                let src = &raw_pieces[(j * 4 + d) * rw..(j * 4 + d + 1) * rw];
                self.raw_to_fit(src, &mut tmp);
                let dst = ((j + 1) * 4 + d) * p;
                pieces[dst..dst + p].copy_from_slice(&tmp);
            }
        }
        self.raw.row_inside(self.range.1, &mut value);
        self.raw_to_fit(&value, &mut tmp);
        let dst = (m + 1) * 4 * p;
        pieces[dst..dst + p].copy_from_slice(&tmp);
        self.raw_to_fit(&self.slope_hi.clone(), &mut tmp);
        pieces[dst + p..dst + 2 * p].copy_from_slice(&tmp);
        self.pieces = pieces;
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    /// Knot locations (thin-plate: the centers).
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn range(&self) -> (f64, f64) {
        self.range
    }

    /// Raw penalty on the `Z` columns returned by [`BasisDesign::evaluate`].
    pub fn penalty_matrix(&self) -> &DMatrix<f64> {
        &self.penalty
    }

    fn raw_row(&self, x: f64, out: &mut [f64]) {
        let (lo, hi) = self.range;
        if x < lo {
            self.raw.row_inside(lo, out);
            for (o, s) in out.iter_mut().zip(&self.slope_lo) {
                *o += (x - lo) * s;
            }
            out[0] = 1.0;
            out[1] = x;
        } else if x > hi {
            self.raw.row_inside(hi, out);
            for (o, s) in out.iter_mut().zip(&self.slope_hi) {
                *o += (x - hi) * s;
            }
            out[0] = 1.0;
            out[1] = x;
        } else {
            self.raw.row_inside(x, out);
        }
    }

    /// Raw `[X | Z]` rows at arbitrary points.
    pub fn evaluate(&self, points: &[f64]) -> BasisExpansion {
        let rw = self.raw_width();
        let mut x = DMatrix::zeros(points.len(), 2);
        let mut z = DMatrix::zeros(points.len(), rw - 2);
        let mut buf = vec![0.0; rw];
        for (i, &pt) in points.iter().enumerate() {
            self.raw_row(pt, &mut buf);
            x[(i, 0)] = buf[0];
            x[(i, 1)] = buf[1];
            for c in 2..rw {
                z[(i, c - 2)] = buf[c];
            }
        }
        BasisExpansion {
            x,
            z,
            penalty: self.penalty.clone(),
        }
    }

    /// Unpenalized columns in the fitting parametrization (always `[1, x]`).
    pub fn n_unpenalized(&self) -> usize {
        2
    }

    pub fn n_penalized(&self) -> usize {
        self.fit_map.ncols()
    }

    pub fn n_coef(&self) -> usize {
        2 + self.fit_map.ncols()
    }

    /// Penalty on the penalized block of the fitting parametrization.
    pub fn fit_penalty(&self) -> &DMatrix<f64> {
        &self.fit_penalty
    }

    /// Writes one row of the fitting model matrix for point `x`.
    pub fn model_row(&self, x: f64, out: &mut [f64]) {
        let p = self.n_coef();
        let (lo, hi) = self.range;
        let (piece, origin) = if x < lo {
            (0, lo)
        } else if x > hi {
            (self.breaks.len(), hi)
        } else {
            let j = self
                .breaks
                .partition_point(|&b| b <= x)
                .saturating_sub(1)
                .min(self.breaks.len() - 2);
            (j + 1, self.breaks[j])
        };
        let t = x - origin;
        let c = &self.pieces[piece * 4 * p..(piece + 1) * 4 * p];
        let (c0, rest) = c.split_at(p);
        let (c1, rest) = rest.split_at(p);
        let (c2, c3) = rest.split_at(p);
        for k in 0..p {
            out[k] = c0[k] + t * (c1[k] + t * (c2[k] + t * c3[k]));
        }
        out[0] = 1.0;
        out[1] = x;
    }

    /// Fitting model matrix `[X | Z]` for a set of points.
    pub fn model_matrix(&self, points: &[f64]) -> DMatrix<f64> {
        let p = self.n_coef();
        let mut m = DMatrix::zeros(points.len(), p);
        let mut buf = vec![0.0; p];
        for (i, &x) in points.iter().enumerate() {
            self.model_row(x, &mut buf);
            for (c, v) in buf.iter().enumerate() {
                m[(i, c)] = *v;
            }
        }
        m
    }

    /// Fitting-parametrization penalty embedded in a full `n_coef × n_coef`
    /// matrix with zeros on the unpenalized block.
    pub fn full_fit_penalty(&self) -> DMatrix<f64> {
        let p = self.n_coef();
        let mut s = DMatrix::zeros(p, p);
        s.view_mut((2, 2), (p - 2, p - 2)).copy_from(&self.fit_penalty);
        s
    }
}

/// Cardinal natural cubic spline matrices: `F` maps knot values to second
/// derivatives and `S = Dᵀ B⁻¹ D` is the integrated squared second derivative.
fn cubic_regression_matrices(knots: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let k = knots.len();
    let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
    let mut d = DMatrix::zeros(k - 2, k);
    let mut b = DMatrix::zeros(k - 2, k - 2);
    for i in 0..k - 2 {
        d[(i, i)] = 1.0 / h[i];
        d[(i, i + 1)] = -1.0 / h[i] - 1.0 / h[i + 1];
        d[(i, i + 2)] = 1.0 / h[i + 1];
        b[(i, i)] = (h[i] + h[i + 1]) / 3.0;
        if i + 1 < k - 2 {
            b[(i, i + 1)] = h[i + 1] / 6.0;
            b[(i + 1, i)] = h[i + 1] / 6.0;
        }
    }
    let chol = b
        .cholesky()
        .ok_or_else(|| OsmeeError::Numerical("cubic spline band matrix".into()))?;
    let binv_d = chol.solve(&d);
    let mut f = DMatrix::zeros(k, k);
    f.view_mut((1, 0), (k - 2, k)).copy_from(&binv_d);
    let s = d.tr_mul(&binv_d);
    Ok((f, (&s + s.transpose()) * 0.5))
}

/// Low-rank thin-plate regression spline: returns the projection from radial
/// evaluations onto the constrained eigenbasis and its penalty.
fn thin_plate_matrices(centers: &[f64], dim: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = centers.len();
    if n < dim {
        return Err(OsmeeError::TooFewPoints {
            needed: dim,
            got: n,
        });
    }
    let e = DMatrix::from_fn(n, n, |i, j| tps_radial(centers[i] - centers[j]));
    let (vals, vecs) = sym_eigen_desc(&e);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| vals[b].abs().total_cmp(&vals[a].abs()));
    let keep = &order[..dim];
    let mut uk = DMatrix::zeros(n, dim);
    let mut dk = DMatrix::zeros(dim, dim);
    for (c, &i) in keep.iter().enumerate() {
        uk.set_column(c, &vecs.column(i));
        dk[(c, c)] = vals[i];
    }
    // absorb Tᵀδ = 0 through the orthogonal complement of Ukᵀ T
    let t = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { centers[i] });
    let a = uk.tr_mul(&t);
    let ata = a.tr_mul(&a);
    let ata_inv = ata
        .try_inverse()
        .ok_or_else(|| OsmeeError::Numerical("thin-plate constraint is singular".into()))?;
    let proj_a = DMatrix::identity(dim, dim) - &a * ata_inv * a.transpose();
    let (pv, pvec) = sym_eigen_desc(&proj_a);
    let zc = pvec.columns(0, dim - 2).into_owned();
    if pv[dim - 3] < 0.5 {
        return Err(OsmeeError::Numerical("thin-plate constraint rank".into()));
    }
    let proj = &uk * &zc;
    let s = zc.transpose() * dk * &zc;
    Ok((proj, (&s + s.transpose()) * 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grid(n: usize) -> Vec<f64> {
        (0..n).map(|i| (i as f64 / (n - 1) as f64).powf(1.3)).collect()
    }

    fn all_kinds(dim: usize) -> Vec<BasisKind> {
        [
            BasisType::TruncatedLinear,
            BasisType::ThinPlate,
            BasisType::CubicRegression,
            BasisType::PSpline,
        ]
        .into_iter()
        .map(|b| BasisKind::new(b, dim))
        .collect()
    }

    #[test]
    fn truncated_linear_examples() {
        let d = BasisDesign::build(
            BasisKind::new(BasisType::TruncatedLinear, 3),
            &[0.0, 0.5, 1.0],
        )
        .unwrap();
        assert_eq!(d.knots(), &[0.25, 0.5, 0.75]);
        let e = d.evaluate(&[0.5, 0.1, 0.8]);
        assert_eq!(e.x.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.5]);
        let z = |r: usize| e.z.row(r).iter().copied().collect::<Vec<_>>();
        assert_eq!(z(0), vec![0.25, 0.0, 0.0]);
        assert_eq!(z(1), vec![0.0, 0.0, 0.0]);
        for (a, b) in z(2).iter().zip([0.55, 0.3, 0.05]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        assert_eq!(d.penalty_matrix(), &DMatrix::identity(3, 3));
    }

    #[test]
    fn constant_input_is_rejected() {
        for k in all_kinds(5) {
            assert_eq!(
                BasisDesign::build(k, &[0.3; 20]).unwrap_err(),
                OsmeeError::DegenerateInput
            );
        }
    }

    #[test]
    fn too_few_points() {
        let err = BasisDesign::build(BasisKind::new(BasisType::ThinPlate, 10), &[0.0, 0.5, 1.0])
            .unwrap_err();
        assert!(matches!(err, OsmeeError::TooFewPoints { .. }));
    }

    #[test]
    fn pspline_local_support_and_penalty_annihilates_linears() {
        let d = BasisDesign::build(BasisKind::new(BasisType::PSpline, 10), &grid(50)).unwrap();
        let pts: Vec<f64> = (0..=200).map(|i| i as f64 / 200.0).collect();
        let e = d.evaluate(&pts);
        for r in 0..pts.len() {
            let nz = e.z.row(r).iter().filter(|v| v.abs() > 0.0).count();
            assert!(nz <= 4, "row {r} has {nz} nonzeros");
            let sum: f64 = e.z.row(r).iter().sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
        }
        let s = d.penalty_matrix();
        let ones = nalgebra::DVector::from_element(10, 1.0);
        assert!((s * &ones).amax() < 1e-12);
        let lin = nalgebra::DVector::from_fn(10, |i, _| i as f64);
        assert!((s * lin).amax() < 1e-12);
    }

    #[test]
    fn penalties_are_psd() {
        for k in all_kinds(12) {
            let d = BasisDesign::build(k, &grid(80)).unwrap();
            for s in [d.penalty_matrix(), d.fit_penalty()] {
                assert!((s - s.transpose()).amax() < 1e-12 * s.amax().max(1.0));
                let (vals, _) = sym_eigen_desc(s);
                let max = vals[0];
                assert!(vals.iter().all(|&v| v >= -1e-8 * max), "{k:?}: {vals}");
            }
        }
    }

    #[test]
    fn reconstruction_is_exact() {
        let pts = grid(60);
        for k in all_kinds(10) {
            let d = BasisDesign::build(k, &pts).unwrap();
            assert_eq!(d.model_matrix(&pts), d.model_matrix(&pts));
            assert_eq!(d.evaluate(&pts), d.evaluate(&pts));
        }
    }

    #[test]
    fn fast_rows_match_exact_rows() {
        let pts = grid(70);
        let probe: Vec<f64> = (0..=300).map(|i| -0.3 + 1.6 * i as f64 / 300.0).collect();
        for k in all_kinds(10) {
            let d = BasisDesign::build(k, &pts).unwrap();
            let raw = d.evaluate(&probe);
            let fit = d.model_matrix(&probe);
            let z_fit = &raw.z * &d.fit_map;
            let scale = raw.z.amax().max(1.0);
            for r in 0..probe.len() {
                for c in 0..d.n_penalized() {
                    let diff = (z_fit[(r, c)] - fit[(r, c + 2)]).abs();
                    assert!(diff < 1e-9 * scale, "{k:?} x={} c={c} diff={diff}", probe[r]);
                }
                assert_eq!(fit[(r, 1)], probe[r]);
            }
        }
    }

    #[test]
    fn extrapolation_is_linear() {
        let pts = grid(40);
        for k in all_kinds(8) {
            let d = BasisDesign::build(k, &pts).unwrap();
            let m = d.model_matrix(&[1.5, 2.0, 2.5, -1.0, -0.5, 0.0]);
            for c in 0..d.n_coef() {
                let right = m[(0, c)] - 2.0 * m[(1, c)] + m[(2, c)];
                let left = m[(3, c)] - 2.0 * m[(4, c)] + m[(5, c)];
                assert!(right.abs() < 1e-9 * m.amax().max(1.0), "{k:?}");
                assert!(left.abs() < 1e-9 * m.amax().max(1.0), "{k:?}");
            }
        }
    }

    #[test]
    fn null_space_lives_in_unpenalized_columns() {
        // raw Z times the dropped null directions must be affine in x
        let pts = grid(50);
        for b in [BasisType::PSpline, BasisType::CubicRegression] {
            let d = BasisDesign::build(BasisKind::new(b, 10), &pts).unwrap();
            let raw = d.evaluate(&pts);
            let resid = &raw.z - &raw.z * &d.fit_map * d.fit_map.transpose();
            let x = &raw.x;
            let xtx = x.tr_mul(x).try_inverse().unwrap();
            let fitted = x * (xtx * x.tr_mul(&resid));
            assert!((&resid - fitted).amax() < 1e-9, "{b}");
        }
    }

    #[test]
    fn thin_plate_uses_capped_centers() {
        let pts: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.37).sin()).collect();
        let d = BasisDesign::build(BasisKind::default(), &pts).unwrap();
        assert!(d.knots().len() <= THIN_PLATE_MAX_KNOTS);
        assert_eq!(d.n_coef(), 40);
        assert!(d.knots().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn parse_names() {
        assert_eq!("tp".parse::<BasisType>().unwrap(), BasisType::ThinPlate);
        assert_eq!("ps".parse::<BasisType>().unwrap(), BasisType::PSpline);
        assert!("xx".parse::<BasisType>().is_err());
    }
}
