//! Latent-predictor model: classical Gaussian measurement error, the
//! Gaussian-prior posterior of `x | w`, and deconvolution-weighted sampling.

pub mod deconv;

pub use deconv::{
    deconvolution_estimate, deconvolve_density, deconvolve_density_with_bandwidth,
    plugin_bandwidth, reference_bandwidth, DeconvDensity, DEFAULT_GRID_SIZE,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{OsmeeError, Result};
use crate::linalg::{mean, sample_variance};

/// Default number of Monte-Carlo draws per observation.
pub const DEFAULT_MC_SAMPLES: usize = 3000;
/// Floor on the prior variance, as a fraction of `Var(w)`.
pub const PRIOR_VARIANCE_FLOOR: f64 = 0.05;

/// Classical additive error `w = x + N(0, sigma_w2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorModel {
    sigma_w2: f64,
}

impl ErrorModel {
    pub fn new(sigma_w2: f64) -> Result<Self> {
        if !(sigma_w2 >= 0.0 && sigma_w2.is_finite()) {
            return Err(OsmeeError::InvalidArgument(format!(
                "measurement error variance must be non-negative, got {sigma_w2}"
            )));
        }
        Ok(Self { sigma_w2 })
    }

    pub fn from_sd(sigma_w: f64) -> Result<Self> {
        if !(sigma_w >= 0.0) {
            return Err(OsmeeError::InvalidArgument(format!(
                "measurement error sd must be non-negative, got {sigma_w}"
            )));
        }
        Self::new(sigma_w * sigma_w)
    }

    pub fn none() -> Self {
        Self { sigma_w2: 0.0 }
    }

    pub fn sigma_w2(&self) -> f64 {
        self.sigma_w2
    }

    pub fn sigma_w(&self) -> f64 {
        self.sigma_w2.sqrt()
    }

    pub fn is_error_free(&self) -> bool {
        self.sigma_w2 == 0.0
    }
}

/// Normal prior `x ~ N(mu_x, sigma_x2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPrior {
    pub mu_x: f64,
    pub sigma_x2: f64,
}

/// Method-of-moments prior: mean of `w` and `Var(w) - sigma_w2`, floored at
/// 5% of `Var(w)`.
pub fn estimate_prior_moments(w: &[f64], err: &ErrorModel) -> Result<GaussianPrior> {
    if w.len() < 3 {
        return Err(OsmeeError::TooFewPoints {
            needed: 3,
            got: w.len(),
        });
    }
    let mu_x = mean(w);
    let var_w = sample_variance(w);
    let sigma_x2 = (var_w - err.sigma_w2()).max(PRIOR_VARIANCE_FLOOR * var_w);
    Ok(GaussianPrior { mu_x, sigma_x2 })
}

/// Mean and variance of `x_i | w_i` under the normal prior.
pub fn posterior_params(prior: &GaussianPrior, err: &ErrorModel, w_i: f64) -> (f64, f64) {
    let s2w = err.sigma_w2();
    if s2w == 0.0 {
        return (w_i, 0.0);
    }
    let sx2 = prior.sigma_x2;
    let denom = sx2 + s2w;
    ((sx2 * w_i + prior.mu_x * s2w) / denom, sx2 * s2w / denom)
}

/// Draws `x_is`, stored row-major with one row per observation.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSampleSet {
    n_obs: usize,
    n_samples: usize,
    data: Vec<f64>,
    pub seed: u64,
}

impl PosteriorSampleSet {
    pub fn from_rows(rows: Vec<Vec<f64>>, seed: u64) -> Result<Self> {
        let n_obs = rows.len();
        let n_samples = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_samples) {
            return Err(OsmeeError::DimensionMismatch(
                "sample rows have unequal lengths".into(),
            ));
        }
        Ok(Self {
            n_obs,
            n_samples,
            data: rows.into_iter().flatten().collect(),
            seed,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_samples..(i + 1) * self.n_samples]
    }

    pub fn all(&self) -> &[f64] {
        &self.data
    }
}

/// Per-observation RNG; rows are independent of scheduling.
pub(crate) fn row_rng(seed: u64, i: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64))
}

fn check_samples(s: usize) -> Result<()> {
    if s < 2 {
        return Err(OsmeeError::InvalidArgument(format!(
            "need at least 2 Monte-Carlo samples, got {s}"
        )));
    }
    if s < 100 {
        log::warn!("only {s} Monte-Carlo samples per observation");
    }
    Ok(())
}

pub(crate) fn gaussian_row(mean: f64, var: f64, s: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if var == 0.0 {
        return vec![mean; s];
    }
    let sd = var.sqrt();
    (0..s)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            mean + sd * z
        })
        .collect()
}

/// `S` independent draws from the Gaussian posterior for every observation.
pub fn sample_gaussian_posterior(
    prior: &GaussianPrior,
    err: &ErrorModel,
    w: &[f64],
    s: usize,
    seed: u64,
) -> Result<PosteriorSampleSet> {
    check_samples(s)?;
    let rows: Vec<Vec<f64>> = w
        .par_iter()
        .enumerate()
        .map(|(i, &wi)| {
            let (m, v) = posterior_params(prior, err, wi);
            gaussian_row(m, v, s, &mut row_rng(seed, i))
        })
        .collect();
    PosteriorSampleSet::from_rows(rows, seed)
}

/// Mean and variance of a gridded density, used as a Gaussian stand-in.
fn density_moments(dens: &DeconvDensity) -> GaussianPrior {
    let total: f64 = dens.density.iter().sum();
    let m = dens.grid.iter().zip(&dens.density).map(|(g, f)| g * f).sum::<f64>() / total;
    let v = dens
        .grid
        .iter()
        .zip(&dens.density)
        .map(|(g, f)| (g - m) * (g - m) * f)
        .sum::<f64>()
        / total;
    if m.is_finite() && v > 0.0 {
        GaussianPrior {
            mu_x: m,
            sigma_x2: v,
        }
    } else {
        let lo = dens.grid[0];
        let hi = *dens.grid.last().unwrap();
        GaussianPrior {
            mu_x: 0.5 * (lo + hi),
            sigma_x2: (hi - lo) * (hi - lo) / 12.0,
        }
    }
}

/// Draws from `f̂_x(g) · N(w_i; g, sigma_w2)` on the density grid, with
/// uniform jitter of half a grid spacing. Observations whose weights all
/// underflow fall back to the Gaussian posterior.
pub fn sample_deconv_posterior(
    dens: &DeconvDensity,
    err: &ErrorModel,
    w: &[f64],
    s: usize,
    seed: u64,
) -> Result<PosteriorSampleSet> {
    check_samples(s)?;
    if err.is_error_free() {
        return Err(OsmeeError::InvalidArgument(
            "deconvolution sampling needs a positive error variance".into(),
        ));
    }
    let grid = &dens.grid;
    let fallback_prior = density_moments(dens);
    let spacing = if grid.len() > 1 {
        grid[1] - grid[0]
    } else {
        0.0
    };
    let s2 = err.sigma_w2();
    let rows: Vec<Vec<f64>> = w
        .par_iter()
        .enumerate()
        .map(|(i, &wi)| {
            let mut rng = row_rng(seed, i);
            let mut cdf = Vec::with_capacity(grid.len());
            let mut acc = 0.0;
            for (g, f) in grid.iter().zip(&dens.density) {
                let d = wi - g;
                acc += f * (-0.5 * d * d / s2).exp();
                cdf.push(acc);
            }
            if !(acc > 0.0 && acc.is_finite()) {
                log::warn!("deconvolution weights vanish for observation {i}; using Gaussian posterior");
                let (m, v) = posterior_params(&fallback_prior, err, wi);
                return gaussian_row(m, v, s, &mut rng);
            }
            (0..s)
                .map(|_| {
                    let u: f64 = rand::Rng::random::<f64>(&mut rng) * acc;
                    let k = cdf.partition_point(|&c| c <= u).min(grid.len() - 1);
                    let jitter: f64 = rand::Rng::random::<f64>(&mut rng) - 0.5;
                    grid[k] + jitter * spacing
                })
                .collect()
        })
        .collect();
    PosteriorSampleSet::from_rows(rows, seed)
}
