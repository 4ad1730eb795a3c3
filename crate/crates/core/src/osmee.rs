//! The iterative estimator: posterior draws of the true predictor, a naive
//! fit on the observed predictor as the starting point, then repeated
//! linearization and heteroscedastic refits. The iterate with the lowest
//! QGCV score is kept.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::basis::{BasisDesign, BasisKind};
use crate::error::{OsmeeError, Result};
use crate::family::{FamilyName, FamilySpec, ScaleParams};
use crate::moments::{assemble_working_model, linearize_all, LinearizedRow, VarianceOptions};
use crate::predictor::{
    deconvolve_density, estimate_prior_moments, sample_deconv_posterior, sample_gaussian_posterior,
    ErrorModel, PosteriorSampleSet, DEFAULT_GRID_SIZE, DEFAULT_MC_SAMPLES,
};
use crate::working_fit::{fit_heteroscedastic, fit_naive_glm, gcv_score, LambdaChoice, NaiveFit, SmoothingMethod};

/// Bisection range for `log θ` in the negative binomial shape estimate.
const LOG_SHAPE_RANGE: (f64, f64) = (-6.0, 6.0);
/// Outer steps are halved at most this many times before the iteration stops.
const MAX_STEP_HALVINGS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum SamplerKind {
    #[default]
    Gaussian,
    Deconvolution,
}

impl SamplerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplerKind::Gaussian => "gaussian",
            SamplerKind::Deconvolution => "deconv",
        }
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SamplerKind {
    type Err = OsmeeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(SamplerKind::Gaussian),
            "deconv" | "deconvolution" => Ok(SamplerKind::Deconvolution),
            _ => Err(OsmeeError::UnknownIdentifier(format!("sampler '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OsmeeConfig {
    pub family: FamilySpec,
    pub basis: BasisKind,
    pub sampler: SamplerKind,
    pub mc_samples: usize,
    pub method: SmoothingMethod,
    pub max_iter: usize,
    /// Stop once `‖Δb‖∞ / ‖b‖∞` falls below this.
    pub tol: f64,
    pub seed: u64,
    pub robust_variance: bool,
    /// Known negative binomial `θ` or gamma shape; estimated when absent.
    pub shape: Option<f64>,
}

impl Default for OsmeeConfig {
    fn default() -> Self {
        Self {
            family: FamilySpec::poisson(),
            basis: BasisKind::default(),
            sampler: SamplerKind::Gaussian,
            mc_samples: DEFAULT_MC_SAMPLES,
            method: SmoothingMethod::Reml,
            max_iter: 50,
            tol: 1e-4,
            seed: 0,
            robust_variance: false,
            shape: None,
        }
    }
}

impl OsmeeConfig {
    pub fn new(family: FamilySpec) -> Self {
        Self {
            family,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(OsmeeError::InvalidArgument(format!("tolerance must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(OsmeeError::InvalidArgument("max_iter must be at least 1".into()));
        }
        if let Some(s) = self.shape {
            if !(s > 0.0) {
                return Err(OsmeeError::InvalidArgument(format!("shape must be positive, got {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Iterate {
    pub coef: DVector<f64>,
    pub lambda: f64,
    pub phi: f64,
    pub edf: f64,
    pub deviance: f64,
    pub qgcv: f64,
    /// Relative sup-norm change from the previous coefficients.
    pub change: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorSummary {
    pub sampler: SamplerKind,
    pub n_samples: usize,
    /// Average over observations of the within-row standard deviation.
    pub mean_sd: f64,
}

impl PosteriorSummary {
    fn of(samples: &PosteriorSampleSet, sampler: SamplerKind) -> Self {
        let n = samples.n_obs();
        let total: f64 = (0..n)
            .map(|i| crate::linalg::sample_variance(samples.row(i)).sqrt())
            .sum();
        Self {
            sampler,
            n_samples: samples.n_samples(),
            mean_sd: total / n as f64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OsmeeFit {
    pub family: FamilySpec,
    pub scale: ScaleParams,
    pub iterates: Vec<Iterate>,
    pub selected: usize,
    pub converged: bool,
    pub naive: NaiveFit,
    /// `None` when the observed predictor was treated as exact.
    pub posterior: Option<PosteriorSummary>,
}

impl OsmeeFit {
    pub fn design(&self) -> &BasisDesign {
        &self.naive.design
    }

    pub fn selected_iterate(&self) -> &Iterate {
        &self.iterates[self.selected]
    }

    pub fn coefficients(&self) -> &DVector<f64> {
        &self.selected_iterate().coef
    }

    /// Fitted mean `μ(r(d)ᵀ b̂)` at each grid point.
    pub fn predict_curve(&self, grid: &[f64]) -> Vec<f64> {
        evaluate_curve(self.design(), &self.family, self.coefficients(), grid)
    }

    /// The naive fit's curve on the same grid.
    pub fn naive_curve(&self, grid: &[f64]) -> Vec<f64> {
        evaluate_curve(self.design(), &self.family, &self.naive.fit.coef, grid)
    }
}

/// `μ(r(d)ᵀ coef)` over a grid for coefficients in the design's fitting coordinates.
pub fn evaluate_curve(design: &BasisDesign, family: &FamilySpec, coef: &DVector<f64>, grid: &[f64]) -> Vec<f64> {
    let mut row = vec![0.0; design.n_coef()];
    grid.iter()
        .map(|&d| {
            design.model_row(d, &mut row);
            let eta: f64 = row.iter().zip(coef.iter()).map(|(r, b)| r * b).sum();
            family.mean_eval(eta)
        })
        .collect()
}

/// `n·D / (n - edf)²`, infinite once `edf ≥ n`.
pub fn qgcv(deviance: f64, n: usize, edf: f64) -> f64 {
    gcv_score(n as f64, deviance, edf)
}

/// Moment estimate of the negative binomial `θ` from
/// `Σ (y-μ)²/(μ+μ²/θ) = n - edf`. Returns `+∞` when the data show no
/// overdispersion.
pub fn estimate_nb_shape(y: &[f64], fitted: &[f64], edf: f64) -> Result<f64> {
    if y.len() != fitted.len() {
        return Err(OsmeeError::DimensionMismatch(format!(
            "{} responses, {} fitted values",
            y.len(),
            fitted.len()
        )));
    }
    let dof = y.len() as f64 - edf;
    if dof <= 0.0 {
        return Err(OsmeeError::TooFewPoints {
            needed: edf.ceil() as usize + 1,
            got: y.len(),
        });
    }
    if let Some(i) = fitted.iter().position(|&m| !(m > 0.0)) {
        return Err(OsmeeError::Domain {
            family: "negative_binomial",
            index: i,
            value: fitted[i],
        });
    }
    let pearson = |log_theta: f64| -> f64 {
        let th = log_theta.exp();
        y.iter()
            .zip(fitted)
            .map(|(yi, m)| (yi - m) * (yi - m) / (m + m * m / th))
            .sum()
    };
    let (mut lo, mut hi) = LOG_SHAPE_RANGE;
    if pearson(hi) < dof {
        log::warn!("no overdispersion detected; using the Poisson limit for the shape");
        return Ok(f64::INFINITY);
    }
    if pearson(lo) > dof {
        log::warn!("shape estimate hit the lower bound exp({lo})");
        return Ok(lo.exp());
    }
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if pearson(mid) < dof {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

/// Moment estimate of the gamma shape: `(n - edf) / Σ ((y-μ)/μ)²`.
pub fn estimate_gamma_shape(y: &[f64], fitted: &[f64], edf: f64) -> Result<f64> {
    let dof = y.len() as f64 - edf;
    if dof <= 0.0 {
        return Err(OsmeeError::TooFewPoints {
            needed: edf.ceil() as usize + 1,
            got: y.len(),
        });
    }
    let ss: f64 = y.iter().zip(fitted).map(|(yi, m)| ((yi - m) / m).powi(2)).sum();
    if !(ss > 0.0 && ss.is_finite()) {
        return Err(OsmeeError::Numerical("gamma shape estimate is undefined".into()));
    }
    Ok(dof / ss)
}

/// Naive fit, estimating the shape first when the family needs one and the
/// configuration leaves it open.
fn naive_with_shape(y: &[f64], w: &[f64], cfg: &OsmeeConfig) -> Result<(NaiveFit, ScaleParams)> {
    let choice = LambdaChoice::Select(cfg.method);
    let family = &cfg.family;
    let shape = match (cfg.family.uses_shape(), cfg.shape) {
        (false, _) => 1.0,
        (true, Some(s)) => s,
        (true, None) => match family.name {
            FamilyName::NegativeBinomial => {
                let pilot_family = FamilySpec::new(FamilyName::Poisson, family.link)?;
                let pilot = fit_naive_glm(y, w, cfg.basis, &pilot_family, &ScaleParams::default(), choice)?;
                let th = estimate_nb_shape(y, &pilot.fitted, pilot.fit.edf)?;
                log::info!("estimated negative binomial shape {th}");
                th
            }
            _ => {
                let pilot = fit_naive_glm(y, w, cfg.basis, family, &ScaleParams::default(), choice)?;
                let g = estimate_gamma_shape(y, &pilot.fitted, pilot.fit.edf)?;
                log::info!("estimated gamma shape {g}");
                g
            }
        },
    };
    let scale = ScaleParams { phi: 1.0, theta: shape };
    let naive = fit_naive_glm(y, w, cfg.basis, family, &scale, choice)?;
    Ok((naive, scale))
}

fn draw_samples(w: &[f64], err: &ErrorModel, cfg: &OsmeeConfig) -> Result<PosteriorSampleSet> {
    match cfg.sampler {
        SamplerKind::Gaussian => {
            let prior = estimate_prior_moments(w, err)?;
            sample_gaussian_posterior(&prior, err, w, cfg.mc_samples, cfg.seed)
        }
        SamplerKind::Deconvolution => {
            let dens = deconvolve_density(w, err, DEFAULT_GRID_SIZE)?;
            sample_deconv_posterior(&dens, err, w, cfg.mc_samples, cfg.seed)
        }
    }
}

/// Weighted residual sum of squares against the Monte-Carlo means plus
/// the roughness penalty, at fixed weights and λ.
fn penalized_objective(
    y: &[f64],
    rows: &[LinearizedRow],
    variances: &[f64],
    penalty: &DMatrix<f64>,
    lambda: f64,
    coef: &DVector<f64>,
) -> f64 {
    let rss: f64 = y
        .iter()
        .zip(rows)
        .zip(variances)
        .map(|((yi, r), v)| (yi - r.mean_mu).powi(2) / v)
        .sum();
    let total = rss + lambda * (coef.transpose() * penalty * coef)[(0, 0)];
    if total.is_finite() {
        total
    } else {
        f64::INFINITY
    }
}

fn sup_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

fn argmin_qgcv(iterates: &[Iterate]) -> usize {
    let mut best = 0;
    for (i, it) in iterates.iter().enumerate() {
        if it.qgcv < iterates[best].qgcv {
            best = i;
        }
    }
    best
}

/// Fits `E[y | x] = μ(f(x))` from responses `y` and error-prone
/// predictor values `w`.
pub fn run_osmee(y: &[f64], w: &[f64], err: &ErrorModel, cfg: &OsmeeConfig) -> Result<OsmeeFit> {
    cfg.validate()?;
    if y.len() != w.len() {
        return Err(OsmeeError::DimensionMismatch(format!(
            "{} responses for {} predictor values",
            y.len(),
            w.len()
        )));
    }
    if let Some(i) = w.iter().position(|v| !v.is_finite()) {
        return Err(OsmeeError::InvalidArgument(format!("predictor value {i} is not finite")));
    }
    let n = y.len();
    let (naive, scale) = naive_with_shape(y, w, cfg)?;
    let family = cfg.family;

    if err.is_error_free() {
        let it = Iterate {
            coef: naive.fit.coef.clone(),
            lambda: naive.fit.lambda,
            phi: naive.fit.phi,
            edf: naive.fit.edf,
            deviance: naive.deviance,
            qgcv: qgcv(naive.deviance, n, naive.fit.edf),
            change: 0.0,
        };
        return Ok(OsmeeFit {
            family,
            scale,
            iterates: vec![it],
            selected: 0,
            converged: naive.fit.converged,
            naive,
            posterior: None,
        });
    }

    let samples = draw_samples(w, err, cfg)?;
    let posterior = PosteriorSummary::of(&samples, cfg.sampler);
    let design = &naive.design;
    let opts = VarianceOptions::for_family(&family, cfg.robust_variance);
    let choice = LambdaChoice::Select(cfg.method);

    let mut b = naive.fit.coef.clone();
    let mut rows = linearize_all(design, &samples, &b, &family, &scale, opts)?;
    let mut iterates = Vec::new();
    let mut converged = false;
    let mut failure = None;
    for iter in 1..=cfg.max_iter {
        let step = assemble_working_model(&rows, y, design.n_unpenalized(), design.fit_penalty(), &family)
            .and_then(|wm| fit_heteroscedastic(&wm, choice).map(|fit| (wm, fit)));
        let (wm, fit) = match step {
            Ok(f) => f,
            Err(e) => {
                failure = Some(e);
                break;
            }
        };
        let variances = wm.variances(fit.phi);
        let penalty = wm.full_penalty();
        let objective = |rows: &[LinearizedRow], coef: &DVector<f64>| {
            penalized_objective(y, rows, &variances, &penalty, fit.lambda, coef)
        };
        let start = objective(&rows, &b);
        let mut delta = &fit.coef - &b;
        let mut halvings = 0;
        let accepted = loop {
            let candidate = &b + &delta;
            match linearize_all(design, &samples, &candidate, &family, &scale, opts) {
                Ok(r) if objective(&r, &candidate) <= start => break Some((candidate, r)),
                Ok(_) | Err(OsmeeError::NonFiniteMean { .. }) if halvings < MAX_STEP_HALVINGS => {
                    delta *= 0.5;
                    halvings += 1;
                }
                Ok(_) => break None,
                Err(e) => {
                    failure = Some(e);
                    break None;
                }
            }
        };
        let Some((next, next_rows)) = accepted else {
            if failure.is_none() {
                log::warn!("iteration {iter}: no step reduces the penalized objective");
            }
            break;
        };
        if halvings > 0 {
            log::debug!("iteration {iter}: step halved {halvings} times");
        }
        let change = sup_norm(&delta) / sup_norm(&b).max(f64::MIN_POSITIVE);
        b = next;
        rows = next_rows;
        let fitted: Vec<f64> = rows.iter().map(|r| r.mean_mu).collect();
        let deviance = family.deviance(y, &fitted, &scale).unwrap_or(f64::INFINITY);
        let score = qgcv(deviance, n, fit.edf);
        log::debug!("iteration {iter}: change {change:.3e}, edf {:.3}, qgcv {score:.6}", fit.edf);
        iterates.push(Iterate {
            coef: b.clone(),
            lambda: fit.lambda,
            phi: fit.phi,
            edf: fit.edf,
            deviance,
            qgcv: score,
            change,
        });
        if halvings == 0 && change < cfg.tol {
            converged = true;
            break;
        }
    }
    if let Some(e) = &failure {
        log::warn!("iteration stopped early: {e}");
    }
    if iterates.is_empty() {
        return Err(failure.unwrap_or(OsmeeError::NotConverged { iterations: 0 }));
    }
    if !converged && failure.is_none() {
        log::warn!("coefficients still moving after {} iterations", cfg.max_iter);
    }
    let selected = argmin_qgcv(&iterates);
    Ok(OsmeeFit {
        family,
        scale,
        iterates,
        selected,
        converged,
        naive,
        posterior: Some(posterior),
    })
}
