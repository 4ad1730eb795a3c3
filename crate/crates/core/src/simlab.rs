//! Simulation studies: the four benchmark regression functions, data
//! generators for Gaussian and skew-normal predictors, and MSE accounting
//! over the evaluation grid.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use rayon::prelude::*;

use crate::error::{OsmeeError, Result};
use crate::family::{FamilyName, FamilySpec};
use crate::linalg::linspace;
use crate::osmee::{evaluate_curve, run_osmee, OsmeeConfig, SamplerKind};
use crate::predictor::ErrorModel;
use crate::working_fit::{fit_naive_glm, LambdaChoice};

/// Points on every evaluation grid.
pub const GRID_POINTS: usize = 101;
/// Shape of the skewed predictor distribution.
pub const SKEW_ALPHA: f64 = 6.0;
/// Decorrelates posterior-sampling streams from data-generation streams.
const SAMPLER_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// A benchmark setting: evaluation interval, predictor and error laws,
/// family shapes, and the regression function on the linear-predictor scale.
#[derive(Clone, Copy)]
pub struct SimCase {
    pub id: u8,
    pub a: f64,
    pub b: f64,
    pub sigma_w2: f64,
    pub mu_x: f64,
    pub sigma_x2: f64,
    pub theta: f64,
    pub gamma: f64,
    pub m: fn(f64) -> f64,
}

impl fmt::Debug for SimCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SimCase")
            .field("id", &self.id)
            .field("a", &self.a)
            .field("b", &self.b)
            .field("sigma_w2", &self.sigma_w2)
            .field("mu_x", &self.mu_x)
            .field("sigma_x2", &self.sigma_x2)
            .field("theta", &self.theta)
            .field("gamma", &self.gamma)
            .finish()
    }
}

fn sine_curve(x: f64) -> f64 {
    2.0 * (4.0 * std::f64::consts::PI * x).sin()
}

fn tanh_curve(x: f64) -> f64 {
    2.0 * x.tanh()
}

fn bump_polynomial(x: f64) -> f64 {
    let p = x.max(0.0).powi(3);
    let q = (1.0 - x).max(0.0).powi(3);
    100.0 * p * q
}

fn bump_with_trend(x: f64) -> f64 {
    2.0 * (-60.0 * (x - 0.6).powi(2)).exp() + 0.25 / (0.1 + x)
}

pub fn builtin_cases() -> [SimCase; 4] {
    [
        SimCase {
            id: 1,
            a: 0.1,
            b: 0.9,
            sigma_w2: 0.141 * 0.141,
            mu_x: 0.5,
            sigma_x2: 0.25 * 0.25,
            theta: 6.0,
            gamma: 2.0,
            m: sine_curve,
        },
        SimCase {
            id: 2,
            a: -2.0,
            b: 2.0,
            sigma_w2: 0.8 * 0.8,
            mu_x: 0.0,
            sigma_x2: 1.0,
            theta: 3.0,
            gamma: 6.0,
            m: tanh_curve,
        },
        SimCase {
            id: 3,
            a: 0.1,
            b: 0.9,
            sigma_w2: 0.11 * 0.11,
            mu_x: 0.5,
            sigma_x2: 0.25 * 0.25,
            theta: 1.5,
            gamma: 10.0,
            m: bump_polynomial,
        },
        SimCase {
            id: 4,
            a: 0.3,
            b: 0.8,
            sigma_w2: 0.075 * 0.075,
            mu_x: 0.6,
            sigma_x2: 0.12 * 0.12,
            theta: 5.0,
            gamma: 4.0,
            m: bump_with_trend,
        },
    ]
}

pub fn case_by_id(id: u8) -> Result<SimCase> {
    builtin_cases()
        .into_iter()
        .find(|c| c.id == id)
        .ok_or_else(|| OsmeeError::UnknownIdentifier(format!("simulation case {id} (expected 1-4)")))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PredictorLaw {
    Gaussian,
    SkewNormal { alpha: f64 },
}

impl PredictorLaw {
    pub fn label(&self) -> String {
        match self {
            PredictorLaw::Gaussian => "gaussian".into(),
            PredictorLaw::SkewNormal { alpha } if *alpha == SKEW_ALPHA => "skew6".into(),
            PredictorLaw::SkewNormal { alpha } => format!("skew{alpha}"),
        }
    }
}

impl FromStr for PredictorLaw {
    type Err = OsmeeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(PredictorLaw::Gaussian),
            "skew6" => Ok(PredictorLaw::SkewNormal { alpha: SKEW_ALPHA }),
            other => other
                .strip_prefix("skew")
                .and_then(|a| a.parse::<f64>().ok())
                .filter(|a| a.is_finite())
                .map(|alpha| PredictorLaw::SkewNormal { alpha })
                .ok_or_else(|| OsmeeError::UnknownIdentifier(format!("predictor distribution '{s}'"))),
        }
    }
}

fn skew_normal_params(target_mean: f64, target_sd: f64, alpha: f64) -> (f64, f64, f64) {
    let delta = alpha / (1.0 + alpha * alpha).sqrt();
    let omega = target_sd / (1.0 - 2.0 * delta * delta / std::f64::consts::PI).sqrt();
    let xi = target_mean - omega * delta * (2.0 / std::f64::consts::PI).sqrt();
    (xi, omega, delta)
}

fn skew_normal_draw<R: Rng>(rng: &mut R, xi: f64, omega: f64, delta: f64) -> f64 {
    let z0: f64 = StandardNormal.sample(rng);
    let z1: f64 = StandardNormal.sample(rng);
    xi + omega * (delta * z0.abs() + (1.0 - delta * delta).sqrt() * z1)
}

/// Skew-normal draws with the given mean and standard deviation.
pub fn sample_skew_normal(target_mean: f64, target_sd: f64, alpha: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
    if !(target_sd > 0.0) {
        return Err(OsmeeError::InvalidArgument(format!("sd must be positive, got {target_sd}")));
    }
    let (xi, omega, delta) = skew_normal_params(target_mean, target_sd, alpha);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| skew_normal_draw(&mut rng, xi, omega, delta)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimData {
    pub y: Vec<f64>,
    pub x: Vec<f64>,
    pub w: Vec<f64>,
}

/// Simulations cover the four count and binary families with their canonical links.
pub fn ensure_simulation_family(family: &FamilySpec) -> Result<()> {
    match family.name {
        FamilyName::Poisson | FamilyName::Bernoulli | FamilyName::NegativeBinomial | FamilyName::Gamma => {
            if family.link == family.name.default_link() {
                Ok(())
            } else {
                Err(OsmeeError::InvalidArgument(format!(
                    "simulation uses the {} link for {}",
                    family.name.default_link().as_str(),
                    family.name
                )))
            }
        }
        _ => Err(OsmeeError::InvalidArgument(format!(
            "simulation supports poisson, bernoulli, negative_binomial and gamma, not {}",
            family.name
        ))),
    }
}

/// One dataset: true predictor, its error-prone copy, and responses.
pub fn generate_dataset(case: &SimCase, family: &FamilySpec, n: usize, law: PredictorLaw, seed: u64) -> Result<SimData> {
    ensure_simulation_family(family)?;
    if n < 8 {
        return Err(OsmeeError::TooFewPoints { needed: 8, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd_x = case.sigma_x2.sqrt();
    let x: Vec<f64> = match law {
        PredictorLaw::Gaussian => (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                case.mu_x + sd_x * z
            })
            .collect(),
        PredictorLaw::SkewNormal { alpha } => {
            let (xi, omega, delta) = skew_normal_params(case.mu_x, sd_x, alpha);
            (0..n).map(|_| skew_normal_draw(&mut rng, xi, omega, delta)).collect()
        }
    };
    let sd_w = case.sigma_w2.sqrt();
    let w: Vec<f64> = x
        .iter()
        .map(|&xi| {
            if sd_w == 0.0 {
                xi
            } else {
                let z: f64 = StandardNormal.sample(&mut rng);
                xi + sd_w * z
            }
        })
        .collect();
    let mut y = Vec::with_capacity(n);
    for &xi in &x {
        let mu = family.mean_eval((case.m)(xi));
        let v = match family.name {
            FamilyName::Poisson => poisson_draw(&mut rng, mu)?,
            FamilyName::Bernoulli => f64::from(u8::from(rng.random::<f64>() < mu)),
            FamilyName::NegativeBinomial => {
                let rate = Gamma::new(case.theta, mu / case.theta)
                    .map_err(|e| OsmeeError::InvalidArgument(e.to_string()))?
                    .sample(&mut rng);
                poisson_draw(&mut rng, rate)?
            }
            FamilyName::Gamma => Gamma::new(case.gamma, mu / case.gamma)
                .map_err(|e| OsmeeError::InvalidArgument(e.to_string()))?
                .sample(&mut rng),
            _ => unreachable!("family checked above"),
        };
        y.push(v);
    }
    Ok(SimData { y, x, w })
}

fn poisson_draw<R: Rng>(rng: &mut R, mu: f64) -> Result<f64> {
    if mu <= 0.0 {
        return Ok(0.0);
    }
    Ok(Poisson::new(mu)
        .map_err(|e| OsmeeError::InvalidArgument(e.to_string()))?
        .sample(rng))
}

/// The evaluation grid of a case and the true mean curve on it.
pub fn truth_grid(case: &SimCase, family: &FamilySpec) -> (Vec<f64>, Vec<f64>) {
    let grid = linspace(case.a, case.b, GRID_POINTS);
    let truth = grid.iter().map(|&d| family.mean_eval((case.m)(d))).collect();
    (grid, truth)
}

/// Pointwise squared error of a fitted curve.
pub fn evaluate_fit(curve: &[f64], truth: &[f64]) -> Result<Vec<f64>> {
    if curve.len() != truth.len() {
        return Err(OsmeeError::DimensionMismatch(format!(
            "curve has {} points, truth {}",
            curve.len(),
            truth.len()
        )));
    }
    Ok(curve.iter().zip(truth).map(|(c, t)| (c - t) * (c - t)).collect())
}

/// MSE and the squared-bias share of it for a set of replicate curves.
pub fn mse_decomposition(curves: &[Vec<f64>], truth: &[f64]) -> Result<(f64, f64)> {
    if curves.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let g = truth.len();
    let mut mse = 0.0;
    let mut mean_err = vec![0.0; g];
    for c in curves {
        let se = evaluate_fit(c, truth)?;
        mse += se.iter().sum::<f64>();
        for (m, (ci, ti)) in mean_err.iter_mut().zip(c.iter().zip(truth)) {
            *m += ci - ti;
        }
    }
    let r = curves.len() as f64;
    mse /= r * g as f64;
    let bias2 = mean_err.iter().map(|e| (e / r) * (e / r)).sum::<f64>() / g as f64;
    let frac = if mse > 0.0 { (bias2 / mse).clamp(0.0, 1.0) } else { 0.0 };
    Ok((mse, frac))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Estimator {
    Naive,
    OsmeeGaussian,
    OsmeeDeconv,
}

impl Estimator {
    pub fn as_str(self) -> &'static str {
        match self {
            Estimator::Naive => "naive",
            Estimator::OsmeeGaussian => "osmee_gaussian",
            Estimator::OsmeeDeconv => "osmee_deconv",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Estimator {
    type Err = OsmeeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "naive" => Ok(Estimator::Naive),
            "osmee_gaussian" | "gaussian" => Ok(Estimator::OsmeeGaussian),
            "osmee_deconv" | "deconv" => Ok(Estimator::OsmeeDeconv),
            _ => Err(OsmeeError::UnknownIdentifier(format!("estimator '{s}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub case: SimCase,
    pub family: FamilySpec,
    pub n_list: Vec<usize>,
    pub reps: usize,
    pub estimators: Vec<Estimator>,
    pub law: PredictorLaw,
    pub seed: u64,
    /// Basis, smoothing method, sample count and iteration limits for the
    /// fits; family, sampler, seed and shape are set per replicate.
    pub fit: OsmeeConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub case: u8,
    pub family: FamilyName,
    pub law: String,
    pub estimator: Estimator,
    pub n: usize,
    pub reps_used: usize,
    pub reps_failed: usize,
    pub mse: f64,
    pub bias2_fraction: f64,
    /// Summed wall-clock seconds of the successful fits.
    pub runtime_sec: f64,
}

fn fit_replicate(
    est: Estimator,
    data: &SimData,
    case: &SimCase,
    cfg: &StudyConfig,
    grid: &[f64],
    seed: u64,
) -> Result<Vec<f64>> {
    let shape = match cfg.family.name {
        FamilyName::NegativeBinomial => Some(case.theta),
        FamilyName::Gamma => Some(case.gamma),
        _ => None,
    };
    let mut fc = OsmeeConfig {
        family: cfg.family,
        shape,
        seed: seed ^ SAMPLER_SEED_SALT,
        ..cfg.fit.clone()
    };
    match est {
        Estimator::Naive => {
            let scale = crate::family::ScaleParams {
                phi: 1.0,
                theta: shape.unwrap_or(1.0),
            };
            let fit = fit_naive_glm(&data.y, &data.w, fc.basis, &cfg.family, &scale, LambdaChoice::Select(fc.method))?;
            Ok(evaluate_curve(&fit.design, &cfg.family, &fit.fit.coef, grid))
        }
        Estimator::OsmeeGaussian | Estimator::OsmeeDeconv => {
            fc.sampler = if est == Estimator::OsmeeGaussian {
                SamplerKind::Gaussian
            } else {
                SamplerKind::Deconvolution
            };
            let err = ErrorModel::new(case.sigma_w2)?;
            let fit = run_osmee(&data.y, &data.w, &err, &fc)?;
            let curve = fit.predict_curve(grid);
            if curve.iter().all(|v| v.is_finite()) {
                Ok(curve)
            } else {
                Err(OsmeeError::Numerical("fitted curve is not finite".into()))
            }
        }
    }
}

/// Fits every estimator on `reps` datasets per sample size. Replicate `r`
/// uses seed `seed + r`.
pub fn run_study(cfg: &StudyConfig) -> Result<Vec<StudyRow>> {
    ensure_simulation_family(&cfg.family)?;
    if cfg.reps < 2 {
        return Err(OsmeeError::InvalidArgument(format!("need at least 2 replicates, got {}", cfg.reps)));
    }
    if cfg.estimators.is_empty() || cfg.n_list.is_empty() {
        return Err(OsmeeError::InvalidArgument("no estimators or sample sizes requested".into()));
    }
    let (grid, truth) = truth_grid(&cfg.case, &cfg.family);
    let mut estimators = cfg.estimators.clone();
    estimators.sort();
    estimators.dedup();
    let mut rows = Vec::new();
    for &n in &cfg.n_list {
        type RepOutcome = Vec<(Estimator, std::result::Result<(Vec<f64>, f64), String>)>;
        let outcomes: Vec<RepOutcome> = (0..cfg.reps)
            .into_par_iter()
            .map(|r| {
                let seed = cfg.seed.wrapping_add(r as u64);
                let data = generate_dataset(&cfg.case, &cfg.family, n, cfg.law, seed);
                estimators
                    .iter()
                    .map(|&est| {
                        let res = match &data {
                            Ok(d) => {
                                let t0 = Instant::now();
                                fit_replicate(est, d, &cfg.case, cfg, &grid, seed)
                                    .map(|c| (c, t0.elapsed().as_secs_f64()))
                                    .map_err(|e| e.to_string())
                            }
                            Err(e) => Err(e.to_string()),
                        };
                        (est, res)
                    })
                    .collect()
            })
            .collect();
        for (k, &est) in estimators.iter().enumerate() {
            let mut curves = Vec::new();
            let mut failed = 0;
            let mut runtime = 0.0;
            for (r, rep) in outcomes.iter().enumerate() {
                match &rep[k].1 {
                    Ok((c, t)) => {
                        curves.push(c.clone());
                        runtime += t;
                    }
                    Err(e) => {
                        log::warn!("case {} n={n} replicate {r} {est} failed: {e}", cfg.case.id);
                        failed += 1;
                    }
                }
            }
            let (mse, bias2_fraction) = mse_decomposition(&curves, &truth)?;
            rows.push(StudyRow {
                case: cfg.case.id,
                family: cfg.family.name,
                law: cfg.law.label(),
                estimator: est,
                n,
                reps_used: curves.len(),
                reps_failed: failed,
                mse,
                bias2_fraction,
                runtime_sec: runtime,
            });
        }
    }
    Ok(rows)
}

/// `var / (var + σ_w²)`.
pub fn reliability_ratio(var: f64, sigma_w2: f64) -> Result<f64> {
    if !(var >= 0.0 && sigma_w2 >= 0.0) {
        return Err(OsmeeError::InvalidArgument(format!(
            "variances must be non-negative, got {var} and {sigma_w2}"
        )));
    }
    if var == 0.0 && sigma_w2 == 0.0 {
        return Err(OsmeeError::DegenerateInput);
    }
    Ok(var / (var + sigma_w2))
}

/// Ratio using the latent variance `Var(w) - σ_w²` in place of `Var(w)`.
pub fn latent_reliability_ratio(var_observed: f64, sigma_w2: f64) -> Result<f64> {
    if sigma_w2 > var_observed {
        return Err(OsmeeError::InvalidArgument(format!(
            "error variance {sigma_w2} exceeds the observed variance {var_observed}"
        )));
    }
    reliability_ratio(var_observed - sigma_w2, sigma_w2)
}

/// Error variance on a transformed scale with the same `var/(var+σ²)`.
pub fn rescale_error_variance(sigma_w2: f64, var_original: f64, var_transformed: f64) -> f64 {
    sigma_w2 * var_transformed / var_original
}
