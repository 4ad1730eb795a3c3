use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use osmee::basis::{BasisKind, BasisType, DEFAULT_BASIS_DIM};
use osmee::family::{FamilyName, FamilySpec, Link};
use osmee::osmee::{OsmeeConfig, SamplerKind};
use osmee::predictor::{ErrorModel, DEFAULT_MC_SAMPLES};
use osmee::working_fit::SmoothingMethod;

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "osmee", version, about = "Semiparametric GLM fits with an error-prone predictor")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a curve to a CSV with columns `y` and `w`.
    Fit(FitArgs),
    /// Run a simulation study on one of the built-in cases.
    Simulate(SimulateArgs),
    /// Refit over a list of error variances.
    Sensitivity(SensitivityArgs),
}

/// Model options shared by every subcommand.
#[derive(Debug, Args, Clone)]
pub struct ModelArgs {
    #[arg(long, default_value = "poisson")]
    pub family: String,
    /// Defaults to the family's canonical link.
    #[arg(long)]
    pub link: Option<String>,
    #[arg(long, default_value = "tp")]
    pub basis: String,
    #[arg(long, default_value_t = DEFAULT_BASIS_DIM)]
    pub basis_dim: usize,
    #[arg(long, default_value = "gaussian")]
    pub sampler: String,
    #[arg(long)]
    pub mc_samples: Option<usize>,
    #[arg(long, default_value = "reml")]
    pub method: String,
    /// Known negative binomial shape.
    #[arg(long)]
    pub theta: Option<f64>,
    /// Known gamma shape.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub robust_variance: bool,
    #[arg(long, default_value_t = 50)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long, short)]
    pub output: PathBuf,
    /// Fit summary; defaults to the output path with `.report.txt`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Error standard deviation.
    #[arg(long, conflicts_with = "sigma_w2", required_unless_present = "sigma_w2")]
    pub sigma_w: Option<f64>,
    /// Error variance.
    #[arg(long)]
    pub sigma_w2: Option<f64>,
    /// `a:b:count`; defaults to 101 points over the range of `w`.
    #[arg(long)]
    pub grid: Option<String>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub case: u8,
    #[arg(long, default_value = "gaussian")]
    pub xdist: String,
    /// Comma-separated sample sizes.
    #[arg(long)]
    pub n_list: Option<String>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Comma-separated subset of naive, osmee_gaussian, osmee_deconv.
    #[arg(long, default_value = "naive,osmee_gaussian,osmee_deconv")]
    pub estimators: String,
    /// 300 replicates, n from 128 to 2048 and 3000 draws unless overridden.
    #[arg(long)]
    pub paper_scale: bool,
    /// Record wall-clock seconds in `runtime_sec` (otherwise `NA`).
    #[arg(long)]
    pub timing: bool,
    #[arg(long, short)]
    pub output: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct SensitivityArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    /// Directory for the per-variance, combined and reliability CSVs.
    #[arg(long, short)]
    pub output_dir: PathBuf,
    #[arg(long, default_value = "0,1,4,9,16")]
    pub sigma_w2_list: String,
    /// Fit on `log w` with each error variance rescaled to keep its reliability ratio.
    #[arg(long)]
    pub log_transform: bool,
    #[arg(long)]
    pub grid: Option<String>,
    #[command(flatten)]
    pub model: ModelArgs,
}

fn parse<T: FromStr<Err = osmee::OsmeeError>>(s: &str) -> CliResult<T> {
    s.parse::<T>().map_err(|e| CliError::Usage(e.to_string()))
}

impl ModelArgs {
    pub fn family(&self) -> CliResult<FamilySpec> {
        let name: FamilyName = parse(&self.family)?;
        let link = match &self.link {
            Some(l) => parse::<Link>(l)?,
            None => name.default_link(),
        };
        FamilySpec::new(name, link).map_err(|e| CliError::Usage(e.to_string()))
    }

    fn shape(&self, family: &FamilySpec) -> CliResult<Option<f64>> {
        match (family.name, self.theta, self.gamma) {
            (_, Some(_), Some(_)) => Err(CliError::Usage("--theta and --gamma are mutually exclusive".into())),
            (FamilyName::NegativeBinomial, t, None) => Ok(t),
            (FamilyName::Gamma, None, g) => Ok(g),
            (_, None, None) => Ok(None),
            (name, _, _) => Err(CliError::Usage(format!(
                "--theta applies to negative_binomial and --gamma to gamma, not {name}"
            ))),
        }
    }

    pub fn config(&self, default_samples: usize) -> CliResult<OsmeeConfig> {
        let family = self.family()?;
        let basis: BasisType = parse(&self.basis)?;
        if self.basis_dim < basis.min_dim() {
            return Err(CliError::Usage(format!(
                "--basis-dim must be at least {} for {}",
                basis.min_dim(),
                basis.short_name()
            )));
        }
        let mc_samples = self.mc_samples.unwrap_or(default_samples);
        if mc_samples < 2 {
            return Err(CliError::Usage("--mc-samples must be at least 2".into()));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(CliError::Usage("--tol must be positive and --max-iter at least 1".into()));
        }
        Ok(OsmeeConfig {
            family,
            basis: BasisKind::new(basis, self.basis_dim),
            sampler: parse::<SamplerKind>(&self.sampler)?,
            mc_samples,
            method: parse::<SmoothingMethod>(&self.method)?,
            max_iter: self.max_iter,
            tol: self.tol,
            seed: self.seed,
            robust_variance: self.robust_variance,
            shape: self.shape(&family)?,
        })
    }
}

impl FitArgs {
    pub fn error_model(&self) -> CliResult<ErrorModel> {
        let e = match (self.sigma_w, self.sigma_w2) {
            (Some(sd), None) => ErrorModel::from_sd(sd),
            (None, Some(v)) => ErrorModel::new(v),
            _ => return Err(CliError::Usage("give exactly one of --sigma-w and --sigma-w2".into())),
        };
        e.map_err(|e| CliError::Usage(e.to_string()))
    }
}

pub const DEFAULT_SAMPLES: usize = DEFAULT_MC_SAMPLES;

/// Grid `a:b:count`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub a: f64,
    pub b: f64,
    pub count: usize,
}

impl FromStr for GridSpec {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        let bad = || CliError::Usage(format!("grid '{s}' is not of the form a:b:count with a < b and count >= 2"));
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let a: f64 = parts[0].trim().parse().map_err(|_| bad())?;
        let b: f64 = parts[1].trim().parse().map_err(|_| bad())?;
        let count: usize = parts[2].trim().parse().map_err(|_| bad())?;
        if !(a < b) || !a.is_finite() || !b.is_finite() || count < 2 {
            return Err(bad());
        }
        Ok(Self { a, b, count })
    }
}

pub fn parse_list<T: FromStr>(s: &str, what: &str) -> CliResult<Vec<T>> {
    let items: Vec<T> = s
        .split(',')
        .map(|p| p.trim())
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<T>()
                .map_err(|_| CliError::Usage(format!("invalid {what} '{p}'")))
        })
        .collect::<CliResult<_>>()?;
    if items.is_empty() {
        return Err(CliError::Usage(format!("empty {what} list")));
    }
    Ok(items)
}
