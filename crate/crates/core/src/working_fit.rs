//! Weighted penalized least squares for the linearized working model, with
//! the smoothing parameter chosen by REML or GCV, and the penalized IRLS
//! fit that ignores measurement error.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DMatrixView, DVector};

use crate::basis::{BasisDesign, BasisKind};
use crate::error::{OsmeeError, Result};
use crate::family::{FamilyName, FamilySpec, ScaleClass, ScaleParams};
use crate::linalg::{chol_logdet, cholesky_with_jitter, median, sym_eigen_desc, weighted_cross, weighted_gram};
use crate::predictor::deconv::golden_section;

/// Search range for `log10 λ`.
pub const LOG10_LAMBDA_RANGE: (f64, f64) = (-8.0, 8.0);
/// Points on the coarse `log10 λ` grid.
pub const LAMBDA_GRID_POINTS: usize = 33;
const WEIGHT_FLOOR: f64 = 1e-8;
const PIRLS_MAX_ITER: usize = 200;
const PIRLS_TOL: f64 = 1e-8;
/// Non-canonical links converge only linearly, so the coefficients must
/// also settle before the deviance test is trusted.
const PIRLS_COEF_TOL: f64 = 1e-9;
const MAX_HALVINGS: usize = 30;
const DISPERSION_MAX_ITER: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum SmoothingMethod {
    #[default]
    Reml,
    Gcv,
}

impl SmoothingMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SmoothingMethod::Reml => "REML",
            SmoothingMethod::Gcv => "GCV",
        }
    }
}

impl fmt::Display for SmoothingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SmoothingMethod {
    type Err = OsmeeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "reml" => Ok(SmoothingMethod::Reml),
            "gcv" => Ok(SmoothingMethod::Gcv),
            _ => Err(OsmeeError::UnknownIdentifier(format!("smoothing method '{s}'"))),
        }
    }
}

/// How the smoothing parameter is obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaChoice {
    Select(SmoothingMethod),
    Fixed(f64),
    /// Penalized coefficients forced to zero.
    Infinite,
}

impl From<SmoothingMethod> for LambdaChoice {
    fn from(m: SmoothingMethod) -> Self {
        LambdaChoice::Select(m)
    }
}

/// `y = M b + ε` with `Var(ε_i) = var_known_i + φ·var_rel_i`.
#[derive(Debug, Clone)]
pub struct WorkingModel {
    response: DVector<f64>,
    model: DMatrix<f64>,
    n_unpenalized: usize,
    var_known: Vec<f64>,
    var_rel: Vec<f64>,
    penalty: DMatrix<f64>,
    scale_class: ScaleClass,
}

impl WorkingModel {
    pub fn new(
        response: DVector<f64>,
        model: DMatrix<f64>,
        n_unpenalized: usize,
        var_known: Vec<f64>,
        var_rel: Vec<f64>,
        penalty: DMatrix<f64>,
        scale_class: ScaleClass,
    ) -> Result<Self> {
        let n = response.len();
        if model.nrows() != n || var_known.len() != n || var_rel.len() != n {
            return Err(OsmeeError::DimensionMismatch(format!(
                "response {n}, model {} rows, variances {}/{}",
                model.nrows(),
                var_known.len(),
                var_rel.len()
            )));
        }
        if n_unpenalized > model.ncols()
            || !penalty.is_square()
            || penalty.nrows() != model.ncols() - n_unpenalized
        {
            return Err(OsmeeError::DimensionMismatch(format!(
                "penalty {}x{} for {} columns with {} unpenalized",
                penalty.nrows(),
                penalty.ncols(),
                model.ncols(),
                n_unpenalized
            )));
        }
        let bad = var_known
            .iter()
            .zip(&var_rel)
            .position(|(k, r)| !(k.is_finite() && r.is_finite() && *k >= 0.0 && *r >= 0.0 && k + r > 0.0));
        if let Some(i) = bad {
            return Err(OsmeeError::Numerical(format!(
                "working variance of observation {i} is not positive"
            )));
        }
        if response.iter().any(|v| !v.is_finite()) || model.iter().any(|v| !v.is_finite()) {
            return Err(OsmeeError::Numerical("working model has non-finite entries".into()));
        }
        Ok(Self {
            response,
            model,
            n_unpenalized,
            var_known,
            var_rel,
            penalty,
            scale_class,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.response.len()
    }

    pub fn n_coef(&self) -> usize {
        self.model.ncols()
    }

    pub fn n_unpenalized(&self) -> usize {
        self.n_unpenalized
    }

    pub fn response(&self) -> &DVector<f64> {
        &self.response
    }

    pub fn model(&self) -> &DMatrix<f64> {
        &self.model
    }

    pub fn m_beta(&self) -> DMatrixView<'_, f64> {
        self.model.columns(0, self.n_unpenalized)
    }

    pub fn m_u(&self) -> DMatrixView<'_, f64> {
        self.model.columns(self.n_unpenalized, self.n_coef() - self.n_unpenalized)
    }

    pub fn var_known(&self) -> &[f64] {
        &self.var_known
    }

    pub fn var_rel(&self) -> &[f64] {
        &self.var_rel
    }

    pub fn penalty(&self) -> &DMatrix<f64> {
        &self.penalty
    }

    pub fn scale_class(&self) -> ScaleClass {
        self.scale_class
    }

    /// Penalty embedded in the full coefficient space.
    pub fn full_penalty(&self) -> DMatrix<f64> {
        let p = self.n_coef();
        let q = p - self.n_unpenalized;
        let mut s = DMatrix::zeros(p, p);
        s.view_mut((self.n_unpenalized, self.n_unpenalized), (q, q))
            .copy_from(&self.penalty);
        s
    }

    /// `var_known + φ·var_rel`, floored relative to its median.
    pub fn variances(&self, phi: f64) -> Vec<f64> {
        let v: Vec<f64> = self
            .var_known
            .iter()
            .zip(&self.var_rel)
            .map(|(k, r)| k + phi * r)
            .collect();
        let floor = WEIGHT_FLOOR * median(&v).max(f64::MIN_POSITIVE);
        v.into_iter().map(|x| x.max(floor)).collect()
    }

    fn scale_mode(&self) -> DispersionMode {
        let any_rel = self.var_rel.iter().any(|&r| r > 0.0);
        let any_known = self.var_known.iter().any(|&k| k > 0.0);
        match (any_known, any_rel) {
            (_, false) => DispersionMode::Known,
            (false, true) => DispersionMode::Relative,
            (true, true) => DispersionMode::Mixed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DispersionMode {
    /// Variances fully specified.
    Known,
    /// All variances proportional to an unknown scale.
    Relative,
    /// Known part plus a scaled part.
    Mixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub coef: DVector<f64>,
    pub n_unpenalized: usize,
    pub lambda: f64,
    pub phi: f64,
    pub edf: f64,
    /// Value of the selection criterion at `lambda` (NaN when not selected).
    pub criterion: f64,
    pub method: Option<SmoothingMethod>,
    pub converged: bool,
    pub iterations: usize,
    /// A diagonal jitter was needed to factor the penalized system.
    pub jittered: bool,
}

impl FitResult {
    pub fn beta(&self) -> DVector<f64> {
        self.coef.rows(0, self.n_unpenalized).into_owned()
    }

    pub fn u(&self) -> DVector<f64> {
        self.coef
            .rows(self.n_unpenalized, self.coef.len() - self.n_unpenalized)
            .into_owned()
    }
}

/// Weighted penalized least-squares problem for fixed weights.
pub struct PenalizedSystem<'a> {
    model: &'a DMatrix<f64>,
    response: &'a [f64],
    weights: Vec<f64>,
    gram: DMatrix<f64>,
    cross: DVector<f64>,
    penalty: DMatrix<f64>,
    penalty_rank: usize,
    n_unpenalized: usize,
    profiled: bool,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub coef: DVector<f64>,
    pub edf: f64,
    /// `Σ w_i (y_i - m_iᵀ b)²`.
    pub rss: f64,
    /// `bᵀ S b`.
    pub roughness: f64,
    pub log_det: f64,
    pub jittered: bool,
}

impl<'a> PenalizedSystem<'a> {
    /// `profiled` treats the weights as relative to an unknown scale.
    pub fn new(
        model: &'a DMatrix<f64>,
        response: &'a [f64],
        weights: Vec<f64>,
        penalty: DMatrix<f64>,
        n_unpenalized: usize,
        profiled: bool,
    ) -> Self {
        let gram = weighted_gram(model, &weights);
        let cross = weighted_cross(model, &weights, response);
        let (ev, _) = sym_eigen_desc(&penalty);
        let top = ev.iter().cloned().fold(0.0, f64::max);
        let penalty_rank = ev.iter().filter(|&&e| e > 1e-10 * top).count();
        Self {
            model,
            response,
            weights,
            gram,
            cross,
            penalty,
            penalty_rank,
            n_unpenalized,
            profiled,
        }
    }

    pub fn n_obs(&self) -> usize {
        self.response.len()
    }

    pub fn penalty_rank(&self) -> usize {
        self.penalty_rank
    }

    fn weighted_rss(&self, coef: &DVector<f64>) -> f64 {
        let fitted = self.model * coef;
        self.response
            .iter()
            .zip(fitted.iter())
            .zip(&self.weights)
            .map(|((y, f), w)| w * (y - f) * (y - f))
            .sum()
    }

    /// Solves `(MᵀWM + λS) b = MᵀWy`.
    pub fn solve(&self, lambda: f64) -> Result<Solution> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(OsmeeError::InvalidArgument(format!(
                "smoothing parameter must be finite and >= 0, got {lambda}"
            )));
        }
        let h = &self.gram + &self.penalty * lambda;
        let (chol, jittered) = cholesky_with_jitter(&h)?;
        let coef = chol.solve(&self.cross);
        let edf = chol.solve(&self.gram).trace();
        let roughness = coef.dot(&(&self.penalty * &coef));
        Ok(Solution {
            rss: self.weighted_rss(&coef),
            log_det: chol_logdet(&chol),
            coef,
            edf,
            roughness,
            jittered,
        })
    }

    /// Fit with the penalized block dropped.
    pub fn solve_unpenalized(&self) -> Result<Solution> {
        let p = self.n_unpenalized;
        let total = self.gram.ncols();
        let g = self.gram.view((0, 0), (p, p)).into_owned();
        let (chol, jittered) = cholesky_with_jitter(&g)?;
        let head = chol.solve(&self.cross.rows(0, p).into_owned());
        let mut coef = DVector::zeros(total);
        coef.rows_mut(0, p).copy_from(&head);
        Ok(Solution {
            rss: self.weighted_rss(&coef),
            log_det: chol_logdet(&chol),
            coef,
            edf: p as f64,
            roughness: 0.0,
            jittered,
        })
    }

    /// Criterion value to minimize at `lambda`, given its solution.
    pub fn criterion(&self, method: SmoothingMethod, lambda: f64, sol: &Solution) -> f64 {
        let n = self.n_obs() as f64;
        match method {
            SmoothingMethod::Gcv => gcv_score(n, sol.rss, sol.edf),
            SmoothingMethod::Reml => {
                let r = self.penalty_rank as f64;
                let dp = sol.rss + lambda * sol.roughness;
                let log_lambda = if r > 0.0 { r * lambda.ln() } else { 0.0 };
                if self.profiled {
                    let null_dim = (self.gram.ncols() - self.penalty_rank) as f64;
                    let dof = n - null_dim;
                    if dof <= 0.0 || dp <= 0.0 {
                        return f64::INFINITY;
                    }
                    0.5 * (dof * (1.0 + (2.0 * std::f64::consts::PI * dp / dof).ln()) + sol.log_det - log_lambda)
                } else {
                    0.5 * (dp + sol.log_det - log_lambda)
                }
            }
        }
    }

    /// Criterion as a function of `log10 λ`, `+∞` where the solve fails.
    pub fn criterion_at(&self, method: SmoothingMethod, log10_lambda: f64) -> f64 {
        let lambda = 10f64.powf(log10_lambda);
        match self.solve(lambda) {
            Ok(sol) => {
                let v = self.criterion(method, lambda, &sol);
                if v.is_nan() {
                    f64::INFINITY
                } else {
                    v
                }
            }
            Err(_) => f64::INFINITY,
        }
    }

    /// Coarse grid over `log10 λ` followed by golden-section refinement.
    pub fn select_lambda(&self, method: SmoothingMethod) -> Result<(f64, Solution, f64)> {
        let (lo, hi) = LOG10_LAMBDA_RANGE;
        let step = (hi - lo) / (LAMBDA_GRID_POINTS - 1) as f64;
        let grid: Vec<f64> = (0..LAMBDA_GRID_POINTS).map(|i| lo + step * i as f64).collect();
        let values: Vec<f64> = grid.iter().map(|&g| self.criterion_at(method, g)).collect();
        let (best, best_val) = values
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
        if !best_val.is_finite() {
            return Err(OsmeeError::Numerical(
                "smoothing criterion is not finite anywhere on the search grid".into(),
            ));
        }
        let a = (grid[best] - step).max(lo);
        let b = (grid[best] + step).min(hi);
        let refined = golden_section(|g| self.criterion_at(method, g), a, b, 1e-4);
        let log_lambda = if self.criterion_at(method, refined) <= best_val {
            refined
        } else {
            grid[best]
        };
        let lambda = 10f64.powf(log_lambda);
        let sol = self.solve(lambda)?;
        let crit = self.criterion(method, lambda, &sol);
        Ok((lambda, sol, crit))
    }

    fn fit(&self, choice: LambdaChoice) -> Result<(f64, Solution, f64)> {
        match choice {
            LambdaChoice::Select(m) => self.select_lambda(m),
            LambdaChoice::Fixed(l) => Ok((l, self.solve(l)?, f64::NAN)),
            LambdaChoice::Infinite => Ok((f64::INFINITY, self.solve_unpenalized()?, f64::NAN)),
        }
    }
}

/// `n·RSS / (n - edf)²`, infinite once `edf` reaches `n`.
pub fn gcv_score(n: f64, rss: f64, edf: f64) -> f64 {
    if edf >= n {
        f64::INFINITY
    } else {
        n * rss / ((n - edf) * (n - edf))
    }
}

/// Pearson equation `Σ e²/(k + φ r) = dof` solved for φ by bisection in log φ.
fn solve_dispersion(resid2: &[f64], known: &[f64], rel: &[f64], dof: f64) -> f64 {
    let lhs = |phi: f64| -> f64 {
        resid2
            .iter()
            .zip(known)
            .zip(rel)
            .map(|((e, k), r)| e / (k + phi * r).max(f64::MIN_POSITIVE))
            .sum()
    };
    let mean_e2 = resid2.iter().sum::<f64>() / resid2.len() as f64;
    let mean_r = rel.iter().sum::<f64>() / rel.len() as f64;
    let reference = (mean_e2 / mean_r.max(f64::MIN_POSITIVE)).max(1e-300);
    let (mut lo, mut hi) = ((reference * 1e-10).ln(), (reference * 1e10).ln());
    if lhs(lo.exp()) <= dof {
        return lo.exp();
    }
    if lhs(hi.exp()) >= dof {
        return hi.exp();
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if lhs(mid.exp()) > dof {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    (0.5 * (lo + hi)).exp()
}

/// Fits a working model, estimating the dispersion when part of the
/// variance is only known up to scale.
pub fn fit_heteroscedastic(model: &WorkingModel, choice: LambdaChoice) -> Result<FitResult> {
    let n = model.n_obs();
    if n <= model.n_unpenalized() {
        return Err(OsmeeError::TooFewPoints {
            needed: model.n_unpenalized() + 1,
            got: n,
        });
    }
    let y = model.response().as_slice();
    let m = model.model();
    let penalty = model.full_penalty();
    let p = model.n_unpenalized();
    let method = match choice {
        LambdaChoice::Select(m) => Some(m),
        _ => None,
    };
    let residuals2 = |coef: &DVector<f64>| -> Vec<f64> {
        let f = m * coef;
        y.iter().zip(f.iter()).map(|(a, b)| (a - b) * (a - b)).collect()
    };
    let package = |lambda: f64, sol: Solution, crit: f64, phi: f64, converged: bool, iterations: usize| FitResult {
        coef: sol.coef,
        n_unpenalized: p,
        lambda,
        phi,
        edf: sol.edf,
        criterion: crit,
        method,
        converged,
        iterations,
        jittered: sol.jittered,
    };
    match model.scale_mode() {
        DispersionMode::Known => {
            let w: Vec<f64> = model.variances(1.0).iter().map(|v| 1.0 / v).collect();
            let sys = PenalizedSystem::new(m, y, w, penalty, p, false);
            let (lambda, sol, crit) = sys.fit(choice)?;
            Ok(package(lambda, sol, crit, 1.0, true, 1))
        }
        DispersionMode::Relative => {
            let w: Vec<f64> = model.variances(1.0).iter().map(|v| 1.0 / v).collect();
            let sys = PenalizedSystem::new(m, y, w, penalty, p, true);
            let (lambda, sol, crit) = sys.fit(choice)?;
            let dof = n as f64 - sol.edf;
            if dof <= 0.0 {
                return Err(OsmeeError::Numerical(format!(
                    "no residual degrees of freedom (edf {:.3} for n = {n})",
                    sol.edf
                )));
            }
            let phi = sol.rss / dof;
            Ok(package(lambda, sol, crit, phi, true, 1))
        }
        DispersionMode::Mixed => {
            let mut phi = 1.0;
            let mut last = None;
            for it in 1..=DISPERSION_MAX_ITER {
                let w: Vec<f64> = model.variances(phi).iter().map(|v| 1.0 / v).collect();
                let sys = PenalizedSystem::new(m, y, w, penalty.clone(), p, false);
                let (lambda, sol, crit) = sys.fit(choice)?;
                let dof = n as f64 - sol.edf;
                if dof <= 0.0 {
                    return Err(OsmeeError::Numerical("no residual degrees of freedom".into()));
                }
                let next = solve_dispersion(&residuals2(&sol.coef), model.var_known(), model.var_rel(), dof);
                let done = (next.ln() - phi.ln()).abs() < 1e-6;
                phi = next;
                last = Some((lambda, sol, crit));
                if done {
                    let (lambda, sol, crit) = last.take().unwrap();
                    return Ok(package(lambda, sol, crit, phi, true, it));
                }
            }
            log::warn!("dispersion iteration did not settle after {DISPERSION_MAX_ITER} rounds");
            let (lambda, sol, crit) = last.unwrap();
            Ok(package(lambda, sol, crit, phi, false, DISPERSION_MAX_ITER))
        }
    }
}

/// Result of the fit that treats the observed predictor as exact.
#[derive(Debug, Clone)]
pub struct NaiveFit {
    pub fit: FitResult,
    pub design: BasisDesign,
    pub fitted: Vec<f64>,
    pub deviance: f64,
}

/// Deviance multiplier making `½·factor·D` the negative log-likelihood
/// implied by the working weights.
fn deviance_factor(family: &FamilySpec, scale: &ScaleParams) -> f64 {
    match family.name {
        FamilyName::Gamma => scale.theta,
        _ => 1.0,
    }
}

fn starting_mean(family: &FamilySpec, y: f64, ybar: f64) -> f64 {
    match family.name {
        FamilyName::Bernoulli => (y + 0.5) / 2.0,
        FamilyName::Binomial { trials } => {
            let m = f64::from(trials.max(1));
            (m * y + 0.5) / (m + 1.0)
        }
        FamilyName::Poisson | FamilyName::QuasiPoisson | FamilyName::NegativeBinomial => y + 0.1,
        FamilyName::Gamma => y,
        FamilyName::Gaussian => match family.link {
            crate::family::Link::Identity => y,
            _ => y.max(1e-3 * ybar.abs().max(1e-3)),
        },
    }
}

/// Penalized IRLS for `y ~ f(w)` in the design's fitting coordinates.
/// Families with a fixed variance function select λ with the known-scale
/// criterion; Gaussian and quasi-Poisson profile the scale out.
pub fn fit_naive_glm(
    y: &[f64],
    w: &[f64],
    basis: BasisKind,
    family: &FamilySpec,
    scale: &ScaleParams,
    choice: LambdaChoice,
) -> Result<NaiveFit> {
    if y.len() != w.len() {
        return Err(OsmeeError::DimensionMismatch(format!(
            "{} responses for {} predictor values",
            y.len(),
            w.len()
        )));
    }
    family.check_response(y)?;
    let design = BasisDesign::build(basis, w)?;
    if y.len() <= design.n_coef() {
        return Err(OsmeeError::TooFewPoints {
            needed: design.n_coef() + 1,
            got: y.len(),
        });
    }
    let m = design.model_matrix(w);
    let penalty = design.fit_penalty().clone();
    let relative = matches!(family.name, FamilyName::Gaussian | FamilyName::QuasiPoisson);
    let unit = ScaleParams { phi: 1.0, theta: scale.theta };
    let factor = deviance_factor(family, scale);
    let s_full = design.full_fit_penalty();
    let ybar = y.iter().sum::<f64>() / y.len() as f64;

    let mut eta: DVector<f64> =
        DVector::from_iterator(y.len(), y.iter().map(|&v| family.link.link(starting_mean(family, v, ybar))));
    let mut prev: Option<DVector<f64>> = None;
    let mut dev_old = f64::INFINITY;
    let mut out = None;
    for iter in 1..=PIRLS_MAX_ITER {
        let mut z = Vec::with_capacity(y.len());
        let mut var = Vec::with_capacity(y.len());
        for (&yi, &e) in y.iter().zip(eta.iter()) {
            let mu = family.mean_eval(e);
            let d = family.mean_deriv(e);
            let d2 = (d * d).max(1e-200);
            z.push(e + (yi - mu) / d.max(1e-100));
            var.push((family.variance_of_mean(mu, &unit).max(1e-300) / d2).min(1e300));
        }
        let zero = vec![0.0; y.len()];
        let (vk, vr) = if relative { (zero, var) } else { (var, zero) };
        let wm = WorkingModel::new(
            DVector::from_vec(z),
            m.clone(),
            design.n_unpenalized(),
            vk,
            vr,
            penalty.clone(),
            family.scale_class(),
        )?;
        let fit = fit_heteroscedastic(&wm, choice)?;
        let lambda_eff = if fit.lambda.is_finite() { fit.lambda } else { 0.0 };
        let objective = |coef: &DVector<f64>| -> Option<(f64, Vec<f64>)> {
            let e = &m * coef;
            let mu: Vec<f64> = e.iter().map(|&v| family.mean_eval(v)).collect();
            let dev = family.deviance(y, &mu, scale).ok()?;
            if !dev.is_finite() {
                return None;
            }
            Some((factor * dev + lambda_eff * coef.dot(&(&s_full * coef)), mu))
        };
        let mut coef = fit.coef.clone();
        let mut accepted = objective(&coef);
        if let Some(old) = &prev {
            let reference = objective(old).map(|o| o.0).unwrap_or(f64::INFINITY);
            let mut halvings = 0;
            while accepted.as_ref().map_or(true, |a| a.0 > reference * (1.0 + 1e-10) + 1e-12)
                && halvings < MAX_HALVINGS
            {
                coef = (&coef + old) * 0.5;
                accepted = objective(&coef);
                halvings += 1;
            }
            if halvings > 0 {
                log::debug!("step halved {halvings} times at iteration {iter}");
            }
        }
        let (_, mu) = accepted.ok_or_else(|| {
            OsmeeError::Numerical("fitted means left the family's domain during IRLS".into())
        })?;
        let dev = family.deviance(y, &mu, scale)?;
        eta = &m * &coef;
        let mut result = fit;
        result.coef = coef.clone();
        result.iterations = iter;
        let settled = prev.as_ref().map_or(false, |old| {
            (&coef - old).amax() <= PIRLS_COEF_TOL * (1.0 + coef.amax())
        });
        let converged = settled && (dev - dev_old).abs() / (dev.abs() + 0.1) < PIRLS_TOL;
        result.converged = converged && result.converged;
        out = Some((result, mu, dev));
        prev = Some(coef);
        if converged {
            break;
        }
        dev_old = dev;
    }
    let (fit, fitted, deviance) = out.expect("at least one IRLS iteration");
    if !fit.converged {
        log::warn!("penalized IRLS stopped after {} iterations", fit.iterations);
    }
    Ok(NaiveFit {
        fit,
        design,
        fitted,
        deviance,
    })
}
