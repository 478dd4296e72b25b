//! Estimators of a target-population mean or quantile from a stacked sample:
//! shift-dependent importance weighting, the doubly flexible and singly
//! flexible estimators, and the oracle that sees the target outcomes.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::fredholm::{build_doubly_kernel, build_singly_kernel, landweber_solve, DiscretizedFredholm, SolveDiagnostics, SolverConfig};
use crate::kernels::{default_bandwidth_1d, default_bandwidth_multi, KernelFamily, KernelSpec};
use crate::models::{
    fit_gaussian_linear, normalize_ratio, weights_w, ConditionalOutcomeModel, DensityRatioModel, FeatureMap,
    MomentMethod, NonparamRegressor, RatioBase, WeightSource, DEFAULT_MASS_FLOOR,
};
use crate::quadrature::QuadratureRule;
use crate::sampling::{mix_seed, StackedSample, SyntheticSample};

/// Bracket widenings allowed before giving up on a root.
const MAX_WIDENINGS: usize = 4;
const BISECTION_RESOLUTION: f64 = 1e-6;
pub const MIN_BOOTSTRAP: usize = 20;

/// Target functional: the mean, or the `t`-th quantile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Estimand {
    Mean,
    Quantile(f64),
}

impl Estimand {
    pub fn quantile(level: f64) -> Result<Self> {
        if level > 0.0 && level < 1.0 {
            Ok(Estimand::Quantile(level))
        } else {
            Err(Error::InvalidArgument(format!("quantile level must lie in (0, 1), got {level}")))
        }
    }

    pub fn median() -> Self {
        Estimand::Quantile(0.5)
    }

    /// Estimating-function kernel `U(y, theta)`: `y - theta` or `t - I(y < theta)`.
    pub fn u(&self, y: f64, theta: f64) -> f64 {
        match *self {
            Estimand::Mean => y - theta,
            Estimand::Quantile(t) => {
                if y < theta {
                    t - 1.0
                } else {
                    t
                }
            }
        }
    }
}

impl fmt::Display for Estimand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Estimand::Mean => f.write_str("mean"),
            Estimand::Quantile(t) => write!(f, "quantile:{t}"),
        }
    }
}

impl FromStr for Estimand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "mean" => Ok(Estimand::Mean),
            "median" => Ok(Estimand::median()),
            _ => {
                let level = s
                    .strip_prefix("quantile:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown target {s:?}; use mean or quantile:<t>")))?;
                Estimand::quantile(level)
            }
        }
    }
}

/// Standard-error construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SeMethod {
    None,
    #[default]
    Plugin,
    Bootstrap { replicates: usize, seed: u64 },
}

impl fmt::Display for SeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SeMethod::None => f.write_str("none"),
            SeMethod::Plugin => f.write_str("plugin"),
            SeMethod::Bootstrap { replicates, seed } => write!(f, "bootstrap:{replicates}:{seed}"),
        }
    }
}

crate::string_serde!(Estimand, SeMethod);

impl FromStr for SeMethod {
    type Err = Error;

    /// `none`, `plugin`, `bootstrap:<B>` or `bootstrap:<B>:<seed>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "none" => return Ok(SeMethod::None),
            "plugin" => return Ok(SeMethod::Plugin),
            _ => {}
        }
        let bad = || Error::InvalidArgument(format!("unknown SE method {s:?}"));
        let rest = s.strip_prefix("bootstrap:").ok_or_else(bad)?;
        let mut parts = rest.split(':');
        let replicates = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let seed = match parts.next() {
            Some(v) => v.parse().map_err(|_| bad())?,
            None => 0,
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(SeMethod::Bootstrap { replicates, seed })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeKind {
    Plugin,
    Bootstrap,
    None,
}

/// Quadrature rule settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuleConfig {
    pub nodes: usize,
    pub lower: f64,
    pub upper: f64,
}

impl Default for RuleConfig {
    fn default() -> Self {
        Self { nodes: 50, lower: -5.0, upper: 5.0 }
    }
}

impl RuleConfig {
    pub fn build(&self) -> Result<QuadratureRule> {
        QuadratureRule::gauss_legendre(self.nodes, self.lower, self.upper)
    }
}

/// Numerical settings shared by the estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    /// Kernel for smoothing over outcomes.
    pub outcome_kernel: KernelFamily,
    /// Outcome bandwidth; `None` gives `n1^(-1/3)`.
    pub outcome_bandwidth: Option<f64>,
    pub rule: RuleConfig,
    pub solver: SolverConfig,
    pub moments: MomentMethod,
    /// Minimum conditional-density mass on the rule; `None` only counts
    /// units below the default floor.
    pub mass_floor: Option<f64>,
    /// Confidence level of reported intervals.
    pub level: f64,
    pub se: SeMethod,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            outcome_kernel: KernelFamily::Gaussian,
            outcome_bandwidth: None,
            rule: RuleConfig::default(),
            solver: SolverConfig::default(),
            moments: MomentMethod::Quadrature,
            mass_floor: None,
            level: 0.95,
            se: SeMethod::Plugin,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidArgument(format!("confidence level must lie in (0, 1), got {}", self.level)));
        }
        if let SeMethod::Bootstrap { replicates, .. } = self.se {
            if replicates < MIN_BOOTSTRAP {
                return Err(Error::InvalidArgument(format!(
                    "bootstrap needs at least {MIN_BOOTSTRAP} resamples, got {replicates}"
                )));
            }
        }
        Ok(())
    }

    fn outcome_spec(&self, n1: usize) -> Result<KernelSpec> {
        let h = match self.outcome_bandwidth {
            Some(h) => h,
            None => default_bandwidth_1d(n1)?,
        };
        KernelSpec::new(self.outcome_kernel, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl Summary {
    fn of(v: &[f64]) -> Option<Self> {
        if v.is_empty() {
            return None;
        }
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some(Self { min, mean: v.iter().sum::<f64>() / v.len() as f64, max })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Last integral-equation solve behind the point estimate.
    pub solver: Option<SolveDiagnostics>,
    /// Number of integral-equation solves.
    pub solves: usize,
    pub b_hat: Option<Summary>,
    /// Units whose working conditional density puts less than 0.99 of its
    /// mass on the quadrature interval.
    pub truncated_units: usize,
    pub bracket_widenings: usize,
    pub bootstrap_failures: usize,
    /// A bootstrap percentile interval that misses the point estimate.
    pub ci_excludes_theta: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub theta: f64,
    pub se: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub se_method: SeKind,
    pub diagnostics: Diagnostics,
}

/// How the ratio working model is obtained on a (re)sample.
#[derive(Debug, Clone)]
pub enum RatioSpec {
    /// Rescaled so that `n^-1 sum r rho*(y) = pi` on each sample.
    Normalize(RatioBase),
    Fixed(DensityRatioModel),
}

impl RatioSpec {
    fn resolve(&self, sample: &StackedSample) -> Result<DensityRatioModel> {
        match self {
            RatioSpec::Normalize(base) => normalize_ratio(base.clone(), sample),
            RatioSpec::Fixed(m) => Ok(m.clone()),
        }
    }
}

/// How the parametric conditional outcome model is obtained.
#[derive(Debug, Clone)]
pub enum OutcomeModelSpec {
    Fixed(ConditionalOutcomeModel),
    /// Gaussian-linear least-squares fit on the source units.
    Fit(FeatureMap),
}

impl OutcomeModelSpec {
    fn resolve(&self, sample: &StackedSample) -> Result<ConditionalOutcomeModel> {
        match self {
            OutcomeModelSpec::Fixed(m) => Ok(m.clone()),
            OutcomeModelSpec::Fit(features) => fit_gaussian_linear(sample, features.clone())?.into_model(),
        }
    }
}

/// Covariate-kernel regressor settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressorSpec {
    pub family: KernelFamily,
    /// Bandwidth `scale * n1^(-1/(4+d))` unless `bandwidth` is set.
    pub scale: f64,
    pub bandwidth: Option<f64>,
    pub standardize: bool,
}

impl Default for RegressorSpec {
    fn default() -> Self {
        Self { family: KernelFamily::Gaussian, scale: 2.5, bandwidth: None, standardize: false }
    }
}

impl RegressorSpec {
    pub fn build(&self, sample: &StackedSample) -> Result<NonparamRegressor> {
        let h = match self.bandwidth {
            Some(h) => h,
            None => default_bandwidth_multi(sample.n1(), sample.dim(), self.scale)?,
        };
        NonparamRegressor::with_bandwidth(sample, KernelSpec::new(self.family, h)?, self.standardize)
    }
}

/// Full recipe for an estimator, used when models must be refitted on
/// bootstrap resamples.
#[derive(Debug, Clone)]
pub enum EstimatorSpec {
    ShiftDependent { ratio: RatioSpec },
    Doubly { ratio: RatioSpec, outcome: OutcomeModelSpec },
    Singly { ratio: RatioSpec, regressor: RegressorSpec },
}

enum Prepared {
    Shift(DensityRatioModel),
    Doubly(DensityRatioModel, ConditionalOutcomeModel),
    Singly(DensityRatioModel, NonparamRegressor),
}

impl EstimatorSpec {
    fn prepare(&self, sample: &StackedSample) -> Result<Prepared> {
        Ok(match self {
            EstimatorSpec::ShiftDependent { ratio } => Prepared::Shift(ratio.resolve(sample)?),
            EstimatorSpec::Doubly { ratio, outcome } => Prepared::Doubly(ratio.resolve(sample)?, outcome.resolve(sample)?),
            EstimatorSpec::Singly { ratio, regressor } => {
                Prepared::Singly(ratio.resolve(sample)?, regressor.build(sample)?)
            }
        })
    }
}

/// Importance-weighted estimator with weights `rho*(y_i)`.
pub fn shift_dependent(
    sample: &StackedSample,
    ratio: &DensityRatioModel,
    estimand: Estimand,
    config: &EstimatorConfig,
) -> Result<EstimateResult> {
    let spec = EstimatorSpec::ShiftDependent { ratio: RatioSpec::Fixed(ratio.clone()) };
    run(&spec, Prepared::Shift(ratio.clone()), sample, estimand, config)
}

/// Doubly flexible estimator with parametric working model `model`.
pub fn doubly_flexible(
    sample: &StackedSample,
    ratio: &DensityRatioModel,
    model: &ConditionalOutcomeModel,
    estimand: Estimand,
    config: &EstimatorConfig,
) -> Result<EstimateResult> {
    let spec = EstimatorSpec::Doubly {
        ratio: RatioSpec::Fixed(ratio.clone()),
        outcome: OutcomeModelSpec::Fixed(model.clone()),
    };
    run(&spec, Prepared::Doubly(ratio.clone(), model.clone()), sample, estimand, config)
}

/// Singly flexible estimator; conditional expectations given `x` come from
/// `regressor`.
pub fn singly_flexible(
    sample: &StackedSample,
    ratio: &DensityRatioModel,
    regressor: &NonparamRegressor,
    estimand: Estimand,
    config: &EstimatorConfig,
) -> Result<EstimateResult> {
    let spec = EstimatorSpec::Singly {
        ratio: RatioSpec::Fixed(ratio.clone()),
        regressor: RegressorSpec {
            family: regressor.spec().family(),
            bandwidth: Some(regressor.spec().bandwidth()),
            ..RegressorSpec::default()
        },
    };
    let prepared = Prepared::Singly(ratio.clone(), regressor.clone());
    if let SeMethod::Bootstrap { .. } = config.se {
        // resamples reuse the regressor's own settings
        let point = point_estimate(&prepared, sample, estimand, config)?;
        let (se, ci, failures) = bootstrap_with(sample, config, |s| {
            let p = Prepared::Singly(ratio.clone(), regressor.rebuild(s)?);
            Ok(point_estimate(&p, s, estimand, config)?.theta)
        })?;
        return Ok(bootstrap_result(point, se, ci, failures));
    }
    run(&spec, prepared, sample, estimand, config)
}

/// Estimator named by `spec`, with models built on `sample`.
pub fn estimate(
    spec: &EstimatorSpec,
    sample: &StackedSample,
    estimand: Estimand,
    config: &EstimatorConfig,
) -> Result<EstimateResult> {
    run(spec, spec.prepare(sample)?, sample, estimand, config)
}

fn run(
    spec: &EstimatorSpec,
    prepared: Prepared,
    sample: &StackedSample,
    estimand: Estimand,
    config: &EstimatorConfig,
) -> Result<EstimateResult> {
    config.validate()?;
    let point = point_estimate(&prepared, sample, estimand, config)?;
    match config.se {
        SeMethod::None => Ok(EstimateResult {
            theta: point.theta,
            se: None,
            ci: None,
            se_method: SeKind::None,
            diagnostics: point.diagnostics,
        }),
        SeMethod::Plugin => {
            let se = point.plugin_se;
            let ci = se.map(|se| normal_ci(point.theta, se, config.level));
            Ok(EstimateResult { theta: point.theta, se, ci, se_method: SeKind::Plugin, diagnostics: point.diagnostics })
        }
        SeMethod::Bootstrap { .. } => {
            let (se, ci, failures) = bootstrap_with(sample, config, |s| {
                let p = spec.prepare(s)?;
                Ok(point_estimate(&p, s, estimand, config)?.theta)
            })?;
            Ok(bootstrap_result(point, se, ci, failures))
        }
    }
}

/// Standard error of `spec` on `sample` by the requested method.
pub fn estimate_se(
    spec: &EstimatorSpec,
    sample: &StackedSample,
    estimand: Estimand,
    config: &EstimatorConfig,
    method: SeMethod,
) -> Result<Option<f64>> {
    let cfg = EstimatorConfig { se: method, ..config.clone() };
    Ok(estimate(spec, sample, estimand, &cfg)?.se)
}

fn bootstrap_result(point: Point, se: f64, ci: (f64, f64), failures: usize) -> EstimateResult {
    let mut diagnostics = point.diagnostics;
    diagnostics.bootstrap_failures = failures;
    diagnostics.ci_excludes_theta = !(ci.0 <= point.theta && point.theta <= ci.1);
    EstimateResult { theta: point.theta, se: Some(se), ci: Some(ci), se_method: SeKind::Bootstrap, diagnostics }
}

fn normal_ci(theta: f64, se: f64, level: f64) -> (f64, f64) {
    let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    (theta - z * se, theta + z * se)
}

/// Stratified bootstrap: resamples sources and targets separately with
/// replacement. Returns the resample standard deviation, the percentile
/// interval and the number of failed resamples.
fn bootstrap_with<F>(sample: &StackedSample, config: &EstimatorConfig, f: F) -> Result<(f64, (f64, f64), usize)>
where
    F: Fn(&StackedSample) -> Result<f64> + Sync,
{
    let SeMethod::Bootstrap { replicates, seed } = config.se else {
        return Err(Error::InvalidArgument("bootstrap settings missing".into()));
    };
    if replicates < MIN_BOOTSTRAP {
        return Err(Error::InvalidArgument(format!("bootstrap needs at least {MIN_BOOTSTRAP} resamples")));
    }
    let src = sample.source_indices();
    let tgt = sample.target_indices();
    let draws: Vec<Result<f64>> = (0..replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, b as u64));
            let mut rows: Vec<usize> = (0..src.len()).map(|_| src[rng.random_range(0..src.len())]).collect();
            rows.extend((0..tgt.len()).map(|_| tgt[rng.random_range(0..tgt.len())]));
            f(&sample.subset(&rows)?)
        })
        .collect();
    let mut thetas = Vec::with_capacity(replicates);
    let mut first_err = None;
    for d in draws {
        match d {
            Ok(v) if v.is_finite() => thetas.push(v),
            Ok(v) => first_err = first_err.or(Some(Error::NonFinite(format!("bootstrap estimate {v}")))),
            Err(e) => first_err = first_err.or(Some(e)),
        }
    }
    let failures = replicates - thetas.len();
    if thetas.len() < MIN_BOOTSTRAP {
        return Err(first_err.unwrap_or_else(|| Error::InvalidArgument("too few bootstrap estimates".into())));
    }
    let m = thetas.iter().sum::<f64>() / thetas.len() as f64;
    let se = (thetas.iter().map(|t| (t - m) * (t - m)).sum::<f64>() / (thetas.len() - 1) as f64).sqrt();
    thetas.sort_by(f64::total_cmp);
    let alpha = 1.0 - config.level;
    let ci = (empirical_quantile(&thetas, alpha / 2.0), empirical_quantile(&thetas, 1.0 - alpha / 2.0));
    Ok((se, ci, failures))
}

/// Generalized inverse `inf{v : F_n(v) >= t}` of sorted values.
fn empirical_quantile(sorted: &[f64], t: f64) -> f64 {
    let n = sorted.len();
    let k = ((t * n as f64).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

/// Bisection for the smallest `theta` with `psi(theta) <= 0`, for a
/// non-increasing `psi`.
///
/// The bracket is widened (doubling its half-width about the midpoint) up
/// to four times until `psi(lo) > 0 >= psi(hi)`. Bisection stops at width
/// `1e-6 (hi - lo)`. If a breakpoint of a piecewise-constant `psi` falls in
/// the final interval, the smallest such breakpoint is returned, otherwise
/// the upper end.
pub fn solve_estimating_equation<F>(mut psi: F, bracket: (f64, f64), breakpoints: &[f64]) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    Ok(solve_with_count(&mut psi, bracket, breakpoints)?.0)
}

fn solve_with_count<F>(psi: &mut F, bracket: (f64, f64), breakpoints: &[f64]) -> Result<(f64, usize)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let (mut lo, mut hi) = bracket;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!("invalid bracket ({lo}, {hi})")));
    }
    let mut widenings = 0;
    let (mut f_lo, mut f_hi) = (psi(lo)?, psi(hi)?);
    while !(f_lo > 0.0 && f_hi <= 0.0) {
        if widenings == MAX_WIDENINGS {
            return Err(Error::Bracket { lo, hi });
        }
        widenings += 1;
        let mid = 0.5 * (lo + hi);
        let half = hi - lo;
        if f_lo <= 0.0 {
            lo = mid - half;
            f_lo = psi(lo)?;
        }
        if f_hi > 0.0 {
            hi = mid + half;
            f_hi = psi(hi)?;
        }
    }
    let resolution = BISECTION_RESOLUTION * (hi - lo);
    while hi - lo > resolution {
        let mid = 0.5 * (lo + hi);
        if psi(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let snapped = breakpoints.iter().copied().filter(|&b| b >= lo && b <= hi).fold(f64::INFINITY, f64::min);
    Ok((if snapped.is_finite() { snapped } else { hi }, widenings))
}

/// Oracle estimator from the hidden target outcomes: their mean, or their
/// empirical quantile.
pub fn oracle(synthetic: &SyntheticSample, estimand: Estimand, config: &EstimatorConfig) -> Result<EstimateResult> {
    config.validate()?;
    let y = &synthetic.hidden_target_y;
    let n0 = y.len();
    if n0 < 2 {
        return Err(Error::InvalidArgument("oracle needs at least two target outcomes".into()));
    }
    let mean = y.iter().sum::<f64>() / n0 as f64;
    let sd = (y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n0 - 1) as f64).sqrt();
    let (theta, se) = match estimand {
        Estimand::Mean => (mean, sd / (n0 as f64).sqrt()),
        Estimand::Quantile(t) => {
            let mut sorted = y.clone();
            sorted.sort_by(f64::total_cmp);
            let q = empirical_quantile(&sorted, t);
            let se = if sd > 0.0 {
                let h = 1.06 * sd * (n0 as f64).powf(-0.2);
                let dens = sorted.iter().map(|v| KernelFamily::Gaussian.eval((q - v) / h)).sum::<f64>() / (n0 as f64 * h);
                (t * (1.0 - t) / n0 as f64).sqrt() / dens
            } else {
                0.0
            };
            (q, se)
        }
    };
    let (se, ci, kind) = match config.se {
        SeMethod::None => (None, None, SeKind::None),
        _ => (Some(se), Some(normal_ci(theta, se, config.level)), SeKind::Plugin),
    };
    Ok(EstimateResult { theta, se, ci, se_method: kind, diagnostics: Diagnostics::default() })
}

struct Point {
    theta: f64,
    plugin_se: Option<f64>,
    diagnostics: Diagnostics,
}

/// Conditional-expectation operator `E{f(Y) | x_i} = sum_j C[i,j] f(v_j)`
/// over support points `v`, with the integral equation on the same points.
struct Flexible<'a> {
    sample: &'a StackedSample,
    problem: DiscretizedFredholm,
    w: Vec<f64>,
    cmat: DMatrix<f64>,
    support: Vec<f64>,
    rho_v: Vec<f64>,
    src: Vec<usize>,
    truncated: usize,
}

impl<'a> Flexible<'a> {
    fn doubly(
        sample: &'a StackedSample,
        ratio: &DensityRatioModel,
        model: &ConditionalOutcomeModel,
        config: &EstimatorConfig,
    ) -> Result<Self> {
        let rule = config.rule.build()?;
        let spec = config.outcome_spec(sample.n1())?;
        let rows: Vec<(Vec<f64>, f64)> = (0..sample.n())
            .into_par_iter()
            .map(|i| {
                let dens = model.density_on_nodes(sample.x(i), &rule)?;
                let mass: f64 = dens.iter().zip(rule.weights()).map(|(p, w)| p * w).sum();
                if let Some(floor) = config.mass_floor {
                    if !(mass >= floor) {
                        let (a, b) = rule.interval();
                        return Err(Error::Truncation { mass, a, b, floor });
                    }
                }
                Ok((dens.iter().zip(rule.weights()).map(|(p, w)| p * w).collect(), mass))
            })
            .collect::<Result<_>>()?;
        let truncated = rows.iter().filter(|(_, m)| *m < DEFAULT_MASS_FLOOR).count();
        let cmat = DMatrix::from_fn(sample.n(), rule.len(), |i, j| rows[i].0[j]);
        let w = weights_w(
            ratio,
            WeightSource::Parametric { model, rule: &rule, method: config.moments, mass_floor: config.mass_floor },
            sample,
        )?;
        let problem =
            build_doubly_kernel(sample, ratio, model, &w, &spec, &rule, config.mass_floor)?.with_config(config.solver);
        Ok(Self {
            sample,
            problem,
            w,
            cmat,
            support: rule.nodes().to_vec(),
            rho_v: rule.nodes().iter().map(|&t| ratio.eval(t)).collect(),
            src: sample.source_indices(),
            truncated,
        })
    }

    fn singly(
        sample: &'a StackedSample,
        ratio: &DensityRatioModel,
        regressor: &NonparamRegressor,
        config: &EstimatorConfig,
    ) -> Result<Self> {
        let spec = config.outcome_spec(sample.n1())?;
        let cmat = regressor.weight_matrix(sample)?;
        let ys = sample.source_outcomes();
        let rho_v: Vec<f64> = ys.iter().map(|&y| ratio.eval(y)).collect();
        let odds = sample.pi() / sample.target_fraction();
        let w = cmat
            .row_iter()
            .map(|row| {
                let (mut e2, mut e1) = (0.0, 0.0);
                for (c, r) in row.iter().zip(&rho_v) {
                    e2 += c * r * r;
                    e1 += c * r;
                }
                let den = e2 + odds * e1;
                if den > 0.0 && den.is_finite() {
                    Ok(1.0 / den)
                } else {
                    Err(Error::NonFinite(format!("weight denominator {den}")))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        let src = sample.source_indices();
        let block = cmat.select_rows(&src);
        let problem = build_singly_kernel(sample, ratio, &block, &w, &spec)?.with_config(config.solver);
        Ok(Self { sample, problem, w, cmat, support: ys, rho_v, src, truncated: 0 })
    }

    /// `b_i = w_i E{a(Y) rho*(Y) | x_i}` for the mean equation.
    fn b_mean(&self) -> Result<(Vec<f64>, SolveDiagnostics)> {
        let (a, diag) = landweber_solve(&self.problem, &vec![0.0; self.problem.cols()])?;
        Ok((self.apply(&a, None), diag))
    }

    /// `b_i = w_i E{U rho*^2 + a rho* | x_i}` with `a` solving the general
    /// equation at `theta`; `warm` holds the previous solution.
    fn b_general(&self, estimand: Estimand, theta: f64, warm: &mut Vec<f64>) -> Result<(Vec<f64>, SolveDiagnostics)> {
        let uv: Vec<f64> =
            self.support.iter().zip(&self.rho_v).map(|(&v, r)| estimand.u(v, theta) * r * r).collect();
        let h = self.conditional(&uv);
        let smoother = self.problem.smoother().expect("builders attach the smoother");
        let h_src = DVector::from_iterator(self.src.len(), self.src.iter().map(|&k| h[k]));
        let smoothed = smoother * h_src;
        let rhs: Vec<f64> = self
            .problem
            .eval_points()
            .iter()
            .zip(smoothed.iter())
            .map(|(&e, s)| estimand.u(e, theta) - s)
            .collect();
        let problem = self.problem.with_target(rhs)?;
        if warm.len() != problem.cols() {
            *warm = vec![0.0; problem.cols()];
        }
        let (a, diag) = landweber_solve(&problem, warm)?;
        *warm = a.clone();
        Ok((self.apply(&a, Some(&h)), diag))
    }

    /// `w_i E{f | x_i}` for values `f` on the support points.
    fn conditional(&self, values: &[f64]) -> Vec<f64> {
        let e = &self.cmat * DVector::from_column_slice(values);
        e.iter().zip(&self.w).map(|(e, w)| e * w).collect()
    }

    fn apply(&self, a: &[f64], offset: Option<&[f64]>) -> Vec<f64> {
        let arho: Vec<f64> = a.iter().zip(&self.rho_v).map(|(a, r)| a * r).collect();
        let mut b = self.conditional(&arho);
        if let Some(h) = offset {
            b.iter_mut().zip(h).for_each(|(b, h)| *b += h);
        }
        b
    }

    fn breakpoints(&self) -> Vec<f64> {
        let mut bp = self.support.clone();
        bp.extend(self.sample.source_outcomes());
        bp.sort_by(f64::total_cmp);
        bp.dedup();
        bp
    }
}

/// Per-unit terms `(r/pi) rho*(y)(u - b) + ((1-r)/(1-pi)) b`.
fn unit_terms(sample: &StackedSample, rho_y: &[f64], u: impl Fn(f64) -> f64, b: Option<&[f64]>) -> Vec<f64> {
    let (pi, tau) = (sample.pi(), sample.target_fraction());
    (0..sample.n())
        .map(|i| {
            let bi = b.map_or(0.0, |b| b[i]);
            match sample.outcome(i) {
                Some(y) => rho_y[i] * (u(y) - bi) / pi,
                None => bi / tau,
            }
        })
        .collect()
}

fn mean_and_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, var.sqrt())
}

fn source_sd(sample: &StackedSample) -> f64 {
    mean_and_sd(&sample.source_outcomes()).1
}

fn point_estimate(
    prepared: &Prepared,
    sample: &StackedSample,
    estimand: Estimand,
    config: &EstimatorConfig,
) -> Result<Point> {
    let ratio = match prepared {
        Prepared::Shift(r) | Prepared::Doubly(r, _) | Prepared::Singly(r, _) => r,
    };
    let rho_y: Vec<f64> = (0..sample.n()).map(|i| sample.outcome(i).map_or(0.0, |y| ratio.eval(y))).collect();
    if rho_y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ratio working model at a source outcome".into()));
    }
    let flexible = match prepared {
        Prepared::Shift(_) => None,
        Prepared::Doubly(r, m) => Some(Flexible::doubly(sample, r, m, config)?),
        Prepared::Singly(r, reg) => Some(Flexible::singly(sample, r, reg, config)?),
    };
    let sqrt_n = (sample.n() as f64).sqrt();
    let mut diagnostics = Diagnostics { truncated_units: flexible.as_ref().map_or(0, |f| f.truncated), ..Default::default() };

    if estimand == Estimand::Mean {
        let b = match &flexible {
            Some(f) => {
                let (b, diag) = f.b_mean()?;
                diagnostics.solver = Some(diag);
                diagnostics.solves = 1;
                Some(b)
            }
            None => None,
        };
        let phi = unit_terms(sample, &rho_y, |y| y, b.as_deref());
        let (theta, sd) = mean_and_sd(&phi);
        diagnostics.b_hat = b.as_deref().and_then(Summary::of);
        if !theta.is_finite() {
            return Err(Error::NonFinite("mean estimate".into()));
        }
        return Ok(Point { theta, plugin_se: Some(sd / sqrt_n), diagnostics });
    }

    // general estimating function: psi(theta) = mean of unit terms
    let mut warm = Vec::new();
    let mut last_diag = None;
    let mut solves = 0;
    let mut unit_psi = |theta: f64, warm: &mut Vec<f64>| -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let b = match &flexible {
            Some(f) => {
                let (b, diag) = f.b_general(estimand, theta, warm)?;
                last_diag = Some(diag);
                solves += 1;
                Some(b)
            }
            None => None,
        };
        Ok((unit_terms(sample, &rho_y, |y| estimand.u(y, theta), b.as_deref()), b))
    };
    let ys = sample.source_outcomes();
    let lo = ys.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
    let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    let breakpoints = match &flexible {
        Some(f) => f.breakpoints(),
        None => {
            let mut v = ys.clone();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v
        }
    };
    let (theta, widenings) = solve_with_count(
        &mut |t| {
            let (v, _) = unit_psi(t, &mut warm)?;
            Ok(v.iter().sum::<f64>() / v.len() as f64)
        },
        (lo, hi),
        &breakpoints,
    )?;
    diagnostics.bracket_widenings = widenings;

    let (terms, b) = unit_psi(theta, &mut warm)?;
    diagnostics.b_hat = b.as_deref().and_then(Summary::of);
    let (_, sd_terms) = mean_and_sd(&terms);
    // slope of the estimating function by a central difference
    let delta = source_sd(sample) * (sample.n1() as f64).powf(-0.2);
    let plugin_se = if delta > 0.0 {
        let (up, _) = unit_psi(theta + delta, &mut warm)?;
        let (down, _) = unit_psi(theta - delta, &mut warm)?;
        let n = sample.n() as f64;
        let slope = (down.iter().sum::<f64>() - up.iter().sum::<f64>()) / (n * 2.0 * delta);
        (slope > 0.0).then(|| sd_terms / (sqrt_n * slope))
    } else {
        None
    };
    diagnostics.solver = last_diag;
    diagnostics.solves = solves;
    Ok(Point { theta, plugin_se, diagnostics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::misspecified_limit_model;
    use crate::sampling::{generate_design, true_conditional_model};

    fn no_se() -> EstimatorConfig {
        EstimatorConfig { se: SeMethod::None, ..Default::default() }
    }

    fn flat() -> DensityRatioModel {
        DensityRatioModel::unnormalized(RatioBase::constant(1.0))
    }

    #[test]
    fn estimand_parsing() {
        assert_eq!("mean".parse::<Estimand>().unwrap(), Estimand::Mean);
        assert_eq!("quantile:0.5".parse::<Estimand>().unwrap(), Estimand::Quantile(0.5));
        assert!("quantile:1".parse::<Estimand>().is_err());
        assert!("mode".parse::<Estimand>().is_err());
        assert_eq!("bootstrap:200".parse::<SeMethod>().unwrap(), SeMethod::Bootstrap { replicates: 200, seed: 0 });
        assert_eq!("bootstrap:50:7".parse::<SeMethod>().unwrap(), SeMethod::Bootstrap { replicates: 50, seed: 7 });
        assert!("bootstrap:x".parse::<SeMethod>().is_err());
    }

    #[test]
    fn shift_dependent_all_source() {
        let s = StackedSample::new(vec![0.0; 4], 1, vec![true; 4], vec![Some(1.0), Some(2.0), Some(4.0), Some(5.0)]);
        // pi = 1 leaves the target side empty; constructing such a sample is rejected
        if let Ok(s) = s {
            let r = shift_dependent(&s, &flat(), Estimand::Mean, &EstimatorConfig::default()).unwrap();
            assert!((r.theta - 3.0).abs() < 1e-15);
            let sd = (10.0f64 / 3.0).sqrt();
            assert!((r.se.unwrap() - sd / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_dependent_hand_value() {
        let s = StackedSample::new(vec![0.0; 4], 1, vec![true, true, false, false], vec![Some(1.0), Some(3.0), None, None])
            .unwrap();
        let r = shift_dependent(&s, &flat(), Estimand::Mean, &no_se()).unwrap();
        assert!((r.theta - 2.0).abs() < 1e-15);
    }

    #[test]
    fn root_examples() {
        let r = solve_estimating_equation(|t| Ok(1.0 - t), (0.0, 2.0), &[]).unwrap();
        assert!((r - 1.0).abs() < 1e-5);
        let ys = [1.0, 2.0, 3.0];
        let median = solve_estimating_equation(
            |t| Ok(ys.iter().map(|&y| Estimand::median().u(y, t)).sum()),
            (0.0, 4.0),
            &ys,
        )
        .unwrap();
        assert_eq!(median, 2.0);
        let (ys, wts) = ([1.0, 2.0], [3.0, 1.0]);
        let q = solve_estimating_equation(
            |t| Ok(ys.iter().zip(wts).map(|(&y, w)| w * Estimand::median().u(y, t)).sum()),
            (0.0, 3.0),
            &ys,
        )
        .unwrap();
        assert_eq!(q, 1.0);
    }

    #[test]
    fn root_bracket_widening_and_failure() {
        let r = solve_estimating_equation(|t| Ok(10.0 - t), (0.0, 2.0), &[]).unwrap();
        assert!((r - 10.0).abs() < 1e-3);
        assert!(matches!(solve_estimating_equation(|_| Ok(1.0), (0.0, 1.0), &[]), Err(Error::Bracket { .. })));
    }

    #[test]
    fn oracle_examples() {
        let gen = generate_design(20, 1).unwrap();
        let mut syn = gen.clone();
        syn.hidden_target_y = vec![1.0, 2.0, 3.0];
        assert_eq!(oracle(&syn, Estimand::Mean, &no_se()).unwrap().theta, 2.0);
        assert_eq!(oracle(&syn, Estimand::median(), &no_se()).unwrap().theta, 2.0);
        syn.hidden_target_y = vec![0.7; 5];
        for est in [Estimand::Mean, Estimand::Quantile(0.1), Estimand::Quantile(0.9)] {
            assert_eq!(oracle(&syn, est, &EstimatorConfig::default()).unwrap().theta, 0.7);
        }
    }

    #[test]
    fn sample_identities_exact() {
        for seed in 0..5 {
            let s = generate_design(333 + seed as usize, seed).unwrap().sample;
            let n = s.n() as f64;
            let sources = s.indicators().iter().filter(|&&r| r).count() as f64;
            let targets = s.indicators().iter().filter(|&&r| !r).count() as f64;
            assert_eq!(sources / n / s.pi(), 1.0);
            assert_eq!(targets / n / s.target_fraction(), 1.0);
        }
    }

    #[test]
    fn forced_b_reduces_to_target_mean() {
        let s = generate_design(50, 3).unwrap().sample;
        let b: Vec<f64> = (0..s.n()).map(|i| s.outcome(i).unwrap_or(0.25 * i as f64)).collect();
        let rho_y: Vec<f64> = (0..s.n()).map(|i| if s.r(i) { 1.3 } else { 0.0 }).collect();
        let terms = unit_terms(&s, &rho_y, |y| y, Some(&b));
        let theta = terms.iter().sum::<f64>() / s.n() as f64;
        let direct: f64 = s.target_indices().iter().map(|&i| b[i]).sum::<f64>() / s.n0() as f64;
        assert!((theta - direct).abs() < 1e-12);
    }

    #[test]
    fn singly_constant_outcome() {
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let r: Vec<bool> = (0..40).map(|i| i % 2 == 0).collect();
        let y: Vec<Option<f64>> = r.iter().map(|&r| r.then_some(1.7)).collect();
        let s = StackedSample::new(x, 1, r, y).unwrap();
        let reg = NonparamRegressor::new(&s, KernelFamily::Gaussian, 2.5, false).unwrap();
        // the minimum-norm solution only pins the source average of b, so the
        // estimate matches c up to the source/target imbalance of b
        let res = singly_flexible(&s, &flat(), &reg, Estimand::Mean, &no_se()).unwrap();
        assert!((res.theta - 1.7).abs() < 1e-3, "{}", res.theta);
    }

    #[test]
    fn design_estimates_are_sane() {
        let gen = generate_design(400, 5).unwrap();
        let s = &gen.sample;
        let ratio = normalize_ratio(RatioBase::exp_tilt(-0.7, 1.2), s).unwrap();
        let cfg = EstimatorConfig::default();
        let model = misspecified_limit_model();
        let d = doubly_flexible(s, &ratio, &model, Estimand::Mean, &cfg).unwrap();
        assert!((d.theta - 1.0).abs() < 0.4, "{d:?}");
        assert!(d.se.unwrap() > 0.0 && d.se.unwrap() < 0.5);
        let (lo, hi) = d.ci.unwrap();
        assert!(lo <= d.theta && d.theta <= hi);
        let reg = NonparamRegressor::new(s, KernelFamily::Gaussian, 2.5, false).unwrap();
        let sf = singly_flexible(s, &ratio, &reg, Estimand::Mean, &cfg).unwrap();
        assert!((sf.theta - 1.0).abs() < 0.4, "{sf:?}");
        let dq = doubly_flexible(s, &ratio, &true_conditional_model(), Estimand::median(), &cfg).unwrap();
        assert!((dq.theta - gen.truth.quantile(0.5)).abs() < 0.4, "{dq:?}");
        assert!(dq.se.unwrap() > 0.0);
    }

    #[test]
    fn estimator_purity_and_bootstrap_determinism() {
        let s = generate_design(120, 8).unwrap().sample;
        let spec = EstimatorSpec::Doubly {
            ratio: RatioSpec::Normalize(RatioBase::exp_tilt(-0.7, 1.2)),
            outcome: OutcomeModelSpec::Fit(FeatureMap::Identity),
        };
        let cfg = EstimatorConfig { se: SeMethod::Bootstrap { replicates: 20, seed: 4 }, ..Default::default() };
        let a = estimate(&spec, &s, Estimand::Mean, &cfg).unwrap();
        let b = estimate(&spec, &s, Estimand::Mean, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.se_method, SeKind::Bootstrap);
        let too_few = EstimatorConfig { se: SeMethod::Bootstrap { replicates: 19, seed: 4 }, ..Default::default() };
        assert!(estimate(&spec, &s, Estimand::Mean, &too_few).is_err());
    }

    #[test]
    fn mass_floor_is_enforced_when_requested() {
        let s = generate_design(100, 2).unwrap().sample;
        let ratio = normalize_ratio(RatioBase::exp_tilt(-0.7, 1.2), &s).unwrap();
        let far = ConditionalOutcomeModel::gaussian_linear(vec![4.9, 0.0, 0.0, 0.0], 0.4, FeatureMap::Identity).unwrap();
        let cfg = EstimatorConfig { mass_floor: Some(0.99), se: SeMethod::None, ..Default::default() };
        assert!(matches!(doubly_flexible(&s, &ratio, &far, Estimand::Mean, &cfg), Err(Error::Truncation { .. })));
        let counted = doubly_flexible(&s, &ratio, &far, Estimand::Mean, &no_se()).unwrap();
        assert_eq!(counted.diagnostics.truncated_units, s.n());
    }
}
