//! Exponential-family descriptors: inverse link, its derivative, variance
//! function and unit deviance for each supported family/link pair.

use std::fmt;
use std::str::FromStr;

use crate::error::{OsmeeError, Result};

/// Saturation bound for the logistic mean.
pub const LOGIT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FamilyName {
    Gaussian,
    Poisson,
    QuasiPoisson,
    Bernoulli,
    /// Binomial proportion with `trials` trials per observation.
    Binomial { trials: u32 },
    NegativeBinomial,
    Gamma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Link {
    Identity,
    Log,
    Logit,
}

/// How much of the conditional variance's first term is known in advance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScaleClass {
    FullyKnown,
    UnknownConstant,
    PartiallyKnown,
}

/// Dispersion `phi` and shape `theta` (negative-binomial θ or gamma γ).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleParams {
    pub phi: f64,
    pub theta: f64,
}

impl Default for ScaleParams {
    fn default() -> Self {
        Self {
            phi: 1.0,
            theta: 1.0,
        }
    }
}

impl ScaleParams {
    pub fn new(phi: f64, theta: f64) -> Result<Self> {
        if !(phi > 0.0 && phi.is_finite()) {
            return Err(OsmeeError::InvalidArgument(format!(
                "phi must be positive, got {phi}"
            )));
        }
        if !(theta > 0.0) {
            return Err(OsmeeError::InvalidArgument(format!(
                "theta must be positive, got {theta}"
            )));
        }
        Ok(Self { phi, theta })
    }

    pub fn with_phi(phi: f64) -> Self {
        Self { phi, theta: 1.0 }
    }

    pub fn with_theta(theta: f64) -> Self {
        Self { phi: 1.0, theta }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FamilySpec {
    pub name: FamilyName,
    pub link: Link,
}

impl FamilyName {
    pub fn default_link(self) -> Link {
        match self {
            FamilyName::Gaussian => Link::Identity,
            FamilyName::Bernoulli | FamilyName::Binomial { .. } => Link::Logit,
            FamilyName::Poisson
            | FamilyName::QuasiPoisson
            | FamilyName::NegativeBinomial
            | FamilyName::Gamma => Link::Log,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FamilyName::Gaussian => "gaussian",
            FamilyName::Poisson => "poisson",
            FamilyName::QuasiPoisson => "quasi_poisson",
            FamilyName::Bernoulli => "bernoulli",
            FamilyName::Binomial { .. } => "binomial",
            FamilyName::NegativeBinomial => "negative_binomial",
            FamilyName::Gamma => "gamma",
        }
    }
}

impl FromStr for FamilyName {
    type Err = OsmeeError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "gaussian" | "normal" => FamilyName::Gaussian,
            "poisson" => FamilyName::Poisson,
            "quasi_poisson" | "quasipoisson" => FamilyName::QuasiPoisson,
            "bernoulli" | "logistic" => FamilyName::Bernoulli,
            "binomial" => FamilyName::Binomial { trials: 1 },
            "negative_binomial" | "negbin" | "nb" => FamilyName::NegativeBinomial,
            "gamma" => FamilyName::Gamma,
            _ => return Err(OsmeeError::UnknownIdentifier(s.to_string())),
        })
    }
}

impl fmt::Display for FamilyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Link {
    pub fn as_str(self) -> &'static str {
        match self {
            Link::Identity => "identity",
            Link::Log => "log",
            Link::Logit => "logit",
        }
    }

    /// Linear predictor for a mean value; used to initialize IRLS.
    pub fn link(self, mu: f64) -> f64 {
        match self {
            Link::Identity => mu,
            Link::Log => mu.ln(),
            Link::Logit => (mu / (1.0 - mu)).ln(),
        }
    }
}

impl FromStr for Link {
    type Err = OsmeeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" => Ok(Link::Identity),
            "log" => Ok(Link::Log),
            "logit" => Ok(Link::Logit),
            _ => Err(OsmeeError::UnknownIdentifier(s.to_string())),
        }
    }
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn logistic(eta: f64) -> f64 {
    let p = if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    };
    p.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS)
}

/// `y ln(y / mu)` with the `0 ln 0 = 0` convention.
fn ylogy(y: f64, mu: f64) -> f64 {
    if y == 0.0 {
        0.0
    } else {
        y * (y / mu).ln()
    }
}

impl FamilySpec {
    /// Supported pairs: gaussian with identity or log, the count and gamma
    /// families with log, and the binary families with logit.
    pub fn new(name: FamilyName, link: Link) -> Result<Self> {
        let ok = match name {
            FamilyName::Gaussian => matches!(link, Link::Identity | Link::Log),
            FamilyName::Bernoulli | FamilyName::Binomial { .. } => link == Link::Logit,
            FamilyName::Poisson
            | FamilyName::QuasiPoisson
            | FamilyName::NegativeBinomial
            | FamilyName::Gamma => link == Link::Log,
        };
        if ok {
            Ok(Self { name, link })
        } else {
            Err(OsmeeError::InvalidArgument(format!(
                "link {link} is not supported for the {name} family"
            )))
        }
    }

    pub fn canonical(name: FamilyName) -> Self {
        Self {
            name,
            link: name.default_link(),
        }
    }

    pub fn gaussian() -> Self {
        Self::canonical(FamilyName::Gaussian)
    }

    pub fn poisson() -> Self {
        Self::canonical(FamilyName::Poisson)
    }

    pub fn bernoulli() -> Self {
        Self::canonical(FamilyName::Bernoulli)
    }

    pub fn negative_binomial() -> Self {
        Self::canonical(FamilyName::NegativeBinomial)
    }

    pub fn gamma() -> Self {
        Self::canonical(FamilyName::Gamma)
    }

    pub fn scale_class(&self) -> ScaleClass {
        match self.name {
            FamilyName::Poisson | FamilyName::Bernoulli | FamilyName::Binomial { .. } => {
                ScaleClass::FullyKnown
            }
            FamilyName::Gaussian => ScaleClass::UnknownConstant,
            FamilyName::Gamma | FamilyName::NegativeBinomial | FamilyName::QuasiPoisson => {
                ScaleClass::PartiallyKnown
            }
        }
    }

    /// Whether the variance function depends on the shape parameter.
    pub fn uses_shape(&self) -> bool {
        matches!(self.name, FamilyName::NegativeBinomial | FamilyName::Gamma)
    }

    /// Inverse link μ(η).
    pub fn mean_eval(&self, eta: f64) -> f64 {
        match self.link {
            Link::Identity => eta,
            Link::Log => eta.exp(),
            Link::Logit => logistic(eta),
        }
    }

    /// Inverse link with an overflow check for the log link.
    pub fn try_mean_eval(&self, eta: f64) -> Result<f64> {
        if !eta.is_finite() {
            return Err(OsmeeError::InvalidArgument(format!(
                "linear predictor must be finite, got {eta}"
            )));
        }
        let mu = self.mean_eval(eta);
        if !mu.is_finite() {
            return Err(OsmeeError::InvalidArgument(format!(
                "mean overflows at eta = {eta}"
            )));
        }
        Ok(mu)
    }

    /// dμ/dη.
    pub fn mean_deriv(&self, eta: f64) -> f64 {
        match self.link {
            Link::Identity => 1.0,
            Link::Log => eta.exp(),
            Link::Logit => {
                let p = logistic(eta);
                p * (1.0 - p)
            }
        }
    }

    /// Variance function expressed in terms of the mean, including the
    /// dispersion and shape parameters.
    pub fn variance_of_mean(&self, mu: f64, scale: &ScaleParams) -> f64 {
        match self.name {
            FamilyName::Gaussian => scale.phi,
            FamilyName::Poisson => mu,
            FamilyName::QuasiPoisson => scale.phi * mu,
            FamilyName::Bernoulli => mu * (1.0 - mu),
            FamilyName::Binomial { trials } => mu * (1.0 - mu) / f64::from(trials.max(1)),
            FamilyName::NegativeBinomial => mu + mu * mu / scale.theta,
            FamilyName::Gamma => mu * mu / scale.theta,
        }
    }

    /// V(η, φ, θ) for a single linear-predictor value.
    pub fn variance_eval(&self, eta: f64, scale: &ScaleParams) -> Result<f64> {
        if self.uses_shape() && !(scale.theta > 0.0) {
            return Err(OsmeeError::InvalidArgument(format!(
                "{} family needs a positive shape, got {}",
                self.name, scale.theta
            )));
        }
        Ok(self.variance_of_mean(self.mean_eval(eta), scale))
    }

    fn check_mean(&self, index: usize, mu: f64) -> Result<()> {
        let ok = match self.name {
            FamilyName::Gaussian => mu.is_finite(),
            FamilyName::Poisson
            | FamilyName::QuasiPoisson
            | FamilyName::NegativeBinomial
            | FamilyName::Gamma => mu > 0.0 && mu.is_finite(),
            FamilyName::Bernoulli | FamilyName::Binomial { .. } => mu > 0.0 && mu < 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(OsmeeError::Domain {
                family: self.name.as_str(),
                index,
                value: mu,
            })
        }
    }

    /// Unit deviance of a single observation.
    pub fn unit_deviance(&self, y: f64, mu: f64, scale: &ScaleParams) -> f64 {
        match self.name {
            FamilyName::Gaussian => (y - mu) * (y - mu),
            FamilyName::Poisson | FamilyName::QuasiPoisson => 2.0 * (ylogy(y, mu) - (y - mu)),
            FamilyName::Bernoulli | FamilyName::Binomial { .. } => {
                let m = match self.name {
                    FamilyName::Binomial { trials } => f64::from(trials.max(1)),
                    _ => 1.0,
                };
                2.0 * m * (ylogy(y, mu) + ylogy(1.0 - y, 1.0 - mu))
            }
            FamilyName::NegativeBinomial if !scale.theta.is_finite() => 2.0 * (ylogy(y, mu) - (y - mu)),
            FamilyName::NegativeBinomial => {
                let th = scale.theta;
                2.0 * (ylogy(y, mu) - (y + th) * ((y + th) / (mu + th)).ln())
            }
            FamilyName::Gamma => 2.0 * (-(y / mu).ln() + (y - mu) / mu),
        }
    }

    /// Checks that every response lies in the family's support.
    pub fn check_response(&self, y: &[f64]) -> Result<()> {
        for (index, &v) in y.iter().enumerate() {
            let ok = match self.name {
                FamilyName::Gaussian => v.is_finite(),
                FamilyName::Poisson | FamilyName::QuasiPoisson | FamilyName::NegativeBinomial => {
                    v >= 0.0 && v.is_finite()
                }
                FamilyName::Bernoulli => v == 0.0 || v == 1.0,
                FamilyName::Binomial { .. } => (0.0..=1.0).contains(&v),
                FamilyName::Gamma => v > 0.0 && v.is_finite(),
            };
            if !ok {
                return Err(OsmeeError::Domain {
                    family: self.name.as_str(),
                    index,
                    value: v,
                });
            }
        }
        Ok(())
    }

    /// Summed unit deviance.
    pub fn deviance(&self, y: &[f64], fitted_mu: &[f64], scale: &ScaleParams) -> Result<f64> {
        if y.len() != fitted_mu.len() {
            return Err(OsmeeError::DimensionMismatch(format!(
                "y has {} entries, fitted has {}",
                y.len(),
                fitted_mu.len()
            )));
        }
        let mut total = 0.0;
        for (i, (&yi, &mi)) in y.iter().zip(fitted_mu).enumerate() {
            self.check_mean(i, mi)?;
            total += self.unit_deviance(yi, mi, scale);
        }
        Ok(total)
    }
}

impl FromStr for FamilySpec {
    type Err = OsmeeError;

    /// Parses `family` or `family:link`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some((f, l)) => FamilySpec::new(f.parse()?, l.parse()?),
            None => Ok(FamilySpec::canonical(s.parse()?)),
        }
    }
}
