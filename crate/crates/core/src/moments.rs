//! Monte-Carlo moments of `y | w, b`: the conditional mean, its first-order
//! expansion around `b₀` (offset plus model-matrix row), and the
//! conditional variance split into known and scale-multiplied parts.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::basis::BasisDesign;
use crate::error::{OsmeeError, Result};
use crate::family::{FamilyName, FamilySpec, ScaleParams};
use crate::linalg::median;
use crate::predictor::PosteriorSampleSet;
use crate::working_fit::WorkingModel;

/// `1 / Φ⁻¹(3/4)`, making the MAD consistent for the normal sd.
const MAD_SCALE: f64 = 1.4826;
/// Relative floor on per-observation working variances.
pub const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientVector {
    pub beta: DVector<f64>,
    pub u: DVector<f64>,
}

impl CoefficientVector {
    pub fn from_concat(b: &DVector<f64>, p: usize) -> Self {
        Self {
            beta: b.rows(0, p).into_owned(),
            u: b.rows(p, b.len() - p).into_owned(),
        }
    }

    pub fn concat(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.beta.len() + self.u.len());
        v.rows_mut(0, self.beta.len()).copy_from(&self.beta);
        v.rows_mut(self.beta.len(), self.u.len()).copy_from(&self.u);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct VarianceOptions {
    /// Use the squared scaled MAD of `μ(r_isᵀb)` instead of the sample variance.
    pub robust: bool,
    /// For Bernoulli responses use `p̄(1 - p̄)` directly.
    pub bernoulli_closed_form: bool,
}

impl VarianceOptions {
    pub fn for_family(family: &FamilySpec, robust: bool) -> Self {
        Self {
            robust,
            bernoulli_closed_form: family.name == FamilyName::Bernoulli,
        }
    }
}

/// Per-observation result of the expansion at `b₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedRow {
    pub offset: f64,
    pub m_row: Vec<f64>,
    pub var_known: f64,
    pub var_rel: f64,
    /// `S⁻¹ Σ μ(r_isᵀ b₀)`.
    pub mean_mu: f64,
}

/// Streaming accumulator over the samples of one observation.
struct ObservationAccumulator<'a> {
    family: &'a FamilySpec,
    b0: &'a [f64],
    obs: usize,
    count: usize,
    sum_mu: f64,
    sum_v: f64,
    m_row: Vec<f64>,
    mus: Vec<f64>,
}

impl<'a> ObservationAccumulator<'a> {
    fn new(family: &'a FamilySpec, b0: &'a [f64], obs: usize, capacity: usize) -> Self {
        Self {
            family,
            b0,
            obs,
            count: 0,
            sum_mu: 0.0,
            sum_v: 0.0,
            m_row: vec![0.0; b0.len()],
            mus: Vec::with_capacity(capacity),
        }
    }

    fn push(&mut self, row: &[f64], scale: &ScaleParams) -> Result<()> {
        let eta: f64 = row.iter().zip(self.b0).map(|(r, b)| r * b).sum();
        let mu = self.family.mean_eval(eta);
        let d = self.family.mean_deriv(eta);
        if !(mu.is_finite() && d.is_finite()) {
            return Err(OsmeeError::NonFiniteMean {
                observation: self.obs,
                sample: self.count,
            });
        }
        self.sum_mu += mu;
        self.sum_v += self.family.variance_of_mean(mu, scale);
        for (m, r) in self.m_row.iter_mut().zip(row) {
            *m += d * r;
        }
        self.mus.push(mu);
        self.count += 1;
        Ok(())
    }

    fn finish(mut self, opts: VarianceOptions) -> Result<LinearizedRow> {
        if self.count < 2 {
            return Err(OsmeeError::InvalidArgument(format!(
                "observation {} has fewer than 2 samples",
                self.obs
            )));
        }
        let s = self.count as f64;
        let mean_mu = self.sum_mu / s;
        self.m_row.iter_mut().for_each(|m| *m /= s);
        let offset = mean_mu
            - self
                .m_row
                .iter()
                .zip(self.b0)
                .map(|(m, b)| m * b)
                .sum::<f64>();
        let spread = if opts.robust {
            let med = median(&self.mus);
            let dev: Vec<f64> = self.mus.iter().map(|m| (m - med).abs()).collect();
            let mad = MAD_SCALE * median(&dev);
            mad * mad
        } else {
            self.mus.iter().map(|m| (m - mean_mu) * (m - mean_mu)).sum::<f64>() / (s - 1.0)
        };
        let mean_v = self.sum_v / s;
        let (var_known, var_rel) = split_variance(self.family, mean_mu, mean_v, spread, opts);
        Ok(LinearizedRow {
            offset,
            m_row: self.m_row,
            var_known,
            var_rel,
            mean_mu,
        })
    }
}

/// Splits `E[V] + Var(μ)` into the part known in advance and the part that
/// multiplies an unknown dispersion. `mean_v` is evaluated with `φ = 1`.
fn split_variance(
    family: &FamilySpec,
    mean_mu: f64,
    mean_v: f64,
    spread: f64,
    opts: VarianceOptions,
) -> (f64, f64) {
    match family.name {
        FamilyName::Bernoulli if opts.bernoulli_closed_form => (mean_mu * (1.0 - mean_mu), 0.0),
        FamilyName::Gaussian | FamilyName::QuasiPoisson => (spread, mean_v),
        _ => (mean_v + spread, 0.0),
    }
}

/// Unit dispersion so `variance_of_mean` returns the φ-free variance shape.
fn unit_phi(scale: &ScaleParams) -> ScaleParams {
    ScaleParams {
        phi: 1.0,
        theta: scale.theta,
    }
}

fn accumulate_matrix<'a>(
    rows: &DMatrix<f64>,
    b: &'a DVector<f64>,
    family: &'a FamilySpec,
    scale: &ScaleParams,
) -> Result<ObservationAccumulator<'a>> {
    let mut acc = ObservationAccumulator::new(family, b.as_slice(), 0, rows.nrows());
    let mut buf = vec![0.0; rows.ncols()];
    for s in 0..rows.nrows() {
        for (c, v) in buf.iter_mut().enumerate() {
            *v = rows[(s, c)];
        }
        acc.push(&buf, scale)?;
    }
    Ok(acc)
}

fn check_rows(rows: &DMatrix<f64>, b: &DVector<f64>) -> Result<()> {
    if rows.ncols() != b.len() {
        return Err(OsmeeError::DimensionMismatch(format!(
            "sample rows have {} columns, coefficients {}",
            rows.ncols(),
            b.len()
        )));
    }
    if rows.nrows() < 2 {
        return Err(OsmeeError::InvalidArgument("need at least 2 samples".into()));
    }
    Ok(())
}

/// `S⁻¹ Σ_s μ(r_isᵀ b)` for one observation's `S × (p+q)` sample rows.
pub fn mc_conditional_mean(rows: &DMatrix<f64>, b: &DVector<f64>, family: &FamilySpec) -> Result<f64> {
    check_rows(rows, b)?;
    let mut sum = 0.0;
    for s in 0..rows.nrows() {
        let eta = rows.row(s).transpose().dot(b);
        let mu = family.mean_eval(eta);
        if !mu.is_finite() {
            return Err(OsmeeError::NonFiniteMean {
                observation: 0,
                sample: s,
            });
        }
        sum += mu;
    }
    Ok(sum / rows.nrows() as f64)
}

/// Offset and model-matrix row of the first-order expansion at `b₀`.
pub fn linearize(rows: &DMatrix<f64>, b0: &DVector<f64>, family: &FamilySpec) -> Result<(f64, DVector<f64>)> {
    check_rows(rows, b0)?;
    let scale = ScaleParams::default();
    let out = accumulate_matrix(rows, b0, family, &scale)?.finish(VarianceOptions::default())?;
    Ok((out.offset, DVector::from_vec(out.m_row)))
}

/// `(var_known, var_rel)` of the conditional variance at `b₀`.
pub fn mc_conditional_variance(
    rows: &DMatrix<f64>,
    b0: &DVector<f64>,
    family: &FamilySpec,
    scale: &ScaleParams,
    opts: VarianceOptions,
) -> Result<(f64, f64)> {
    check_rows(rows, b0)?;
    let s = unit_phi(scale);
    let out = accumulate_matrix(rows, b0, family, &s)?.finish(opts)?;
    Ok((out.var_known, out.var_rel))
}

/// Expansion for every observation, evaluating each draw on `design`.
pub fn linearize_all(
    design: &BasisDesign,
    samples: &PosteriorSampleSet,
    b0: &DVector<f64>,
    family: &FamilySpec,
    scale: &ScaleParams,
    opts: VarianceOptions,
) -> Result<Vec<LinearizedRow>> {
    if b0.len() != design.n_coef() {
        return Err(OsmeeError::DimensionMismatch(format!(
            "design has {} columns, coefficients {}",
            design.n_coef(),
            b0.len()
        )));
    }
    let s = unit_phi(scale);
    let b = b0.as_slice();
    (0..samples.n_obs())
        .into_par_iter()
        .map(|i| {
            let mut buf = vec![0.0; design.n_coef()];
            let draws = samples.row(i);
            let mut acc = ObservationAccumulator::new(family, b, i, draws.len());
            for &x in draws {
                design.model_row(x, &mut buf);
                acc.push(&buf, &s)?;
            }
            acc.finish(opts)
        })
        .collect()
}

/// `S⁻¹ Σ_s μ(r_isᵀ b)` for every observation.
pub fn conditional_means(
    design: &BasisDesign,
    samples: &PosteriorSampleSet,
    b: &DVector<f64>,
    family: &FamilySpec,
) -> Result<Vec<f64>> {
    (0..samples.n_obs())
        .into_par_iter()
        .map(|i| {
            let mut buf = vec![0.0; design.n_coef()];
            let draws = samples.row(i);
            let mut sum = 0.0;
            for (s, &x) in draws.iter().enumerate() {
                design.model_row(x, &mut buf);
                let eta: f64 = buf.iter().zip(b.iter()).map(|(r, c)| r * c).sum();
                let mu = family.mean_eval(eta);
                if !mu.is_finite() {
                    return Err(OsmeeError::NonFiniteMean {
                        observation: i,
                        sample: s,
                    });
                }
                sum += mu;
            }
            Ok(sum / draws.len() as f64)
        })
        .collect()
}

/// Stacks expanded rows into the working model `y - O = M b + ε`.
pub fn assemble_working_model(
    rows: &[LinearizedRow],
    y: &[f64],
    n_unpenalized: usize,
    penalty: &DMatrix<f64>,
    family: &FamilySpec,
) -> Result<WorkingModel> {
    let n = rows.len();
    if y.len() != n {
        return Err(OsmeeError::DimensionMismatch(format!(
            "{} responses for {} expanded rows",
            y.len(),
            n
        )));
    }
    let width = rows.first().map_or(0, |r| r.m_row.len());
    if n_unpenalized > width || penalty.nrows() != width - n_unpenalized || !penalty.is_square() {
        return Err(OsmeeError::DimensionMismatch(format!(
            "penalty {}x{} does not match {} penalized columns",
            penalty.nrows(),
            penalty.ncols(),
            width - n_unpenalized
        )));
    }
    let mut model = DMatrix::zeros(n, width);
    let mut response = DVector::zeros(n);
    let mut var_known = Vec::with_capacity(n);
    let mut var_rel = Vec::with_capacity(n);
    for (i, r) in rows.iter().enumerate() {
        if r.m_row.len() != width {
            return Err(OsmeeError::DimensionMismatch(format!("row {i} has wrong width")));
        }
        for (c, v) in r.m_row.iter().enumerate() {
            model[(i, c)] = *v;
        }
        response[i] = y[i] - r.offset;
        var_known.push(r.var_known.max(0.0));
        var_rel.push(r.var_rel.max(0.0));
    }
    let med = median(&var_known);
    let floor = VARIANCE_FLOOR * if med > 0.0 { med } else { 1.0 };
    for (k, r) in var_known.iter_mut().zip(&var_rel) {
        if *r == 0.0 && *k < floor {
            *k = floor;
        }
    }
    WorkingModel::new(
        response,
        model,
        n_unpenalized,
        var_known,
        var_rel,
        penalty.clone(),
        family.scale_class(),
    )
}
