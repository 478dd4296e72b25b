//! Working models: the outcome density-ratio model, parametric conditional
//! outcome models with least-squares/MLE fitting, conditional expectations
//! under those models, and the covariate-kernel regressor used when the
//! conditional expectation is estimated nonparametrically.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{default_bandwidth_multi, KernelFamily, KernelSpec, DENOMINATOR_FLOOR};
use crate::quadrature::QuadratureRule;
use crate::sampling::StackedSample;

/// Minimum conditional-density mass a rule must capture by default.
pub const DEFAULT_MASS_FLOOR: f64 = 0.99;

/// Unnormalized shape `rho~(y)` of a density-ratio working model.
#[derive(Clone)]
pub enum RatioBase {
    /// `exp(intercept + slope * y)`.
    ExpTilt { intercept: f64, slope: f64 },
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl RatioBase {
    pub fn exp_tilt(intercept: f64, slope: f64) -> Self {
        RatioBase::ExpTilt { intercept, slope }
    }

    /// Constant ratio, i.e. no shift.
    pub fn constant(value: f64) -> Self {
        RatioBase::ExpTilt { intercept: value.ln(), slope: 0.0 }
    }

    pub fn custom<F: Fn(f64) -> f64 + Send + Sync + 'static>(f: F) -> Self {
        RatioBase::Custom(Arc::new(f))
    }

    pub fn eval(&self, y: f64) -> f64 {
        match self {
            RatioBase::ExpTilt { intercept, slope } => (intercept + slope * y).exp(),
            RatioBase::Custom(f) => f(y),
        }
    }
}

impl fmt::Debug for RatioBase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RatioBase::ExpTilt { intercept, slope } => write!(f, "exp({intercept} + {slope}*y)"),
            RatioBase::Custom(_) => f.write_str("custom"),
        }
    }
}

/// Working model `rho*(y) = c* . rho~(y)`.
#[derive(Debug, Clone)]
pub struct DensityRatioModel {
    base: RatioBase,
    normalizer: f64,
}

impl DensityRatioModel {
    /// Uses the base as is (`c* = 1`).
    pub fn unnormalized(base: RatioBase) -> Self {
        Self { base, normalizer: 1.0 }
    }

    pub fn eval(&self, y: f64) -> f64 {
        self.normalizer * self.base.eval(y)
    }

    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    pub fn base(&self) -> &RatioBase {
        &self.base
    }

    /// `(log_scale, slope)` with `rho*(y) = exp(log_scale + slope*y)` for
    /// exponential-tilt bases.
    pub fn exp_tilt(&self) -> Option<(f64, f64)> {
        match self.base {
            RatioBase::ExpTilt { intercept, slope } => Some((self.normalizer.ln() + intercept, slope)),
            RatioBase::Custom(_) => None,
        }
    }
}

/// Chooses `c*` so that `n^-1 sum_i r_i rho*(y_i) = pi`.
pub fn normalize_ratio(base: RatioBase, sample: &StackedSample) -> Result<DensityRatioModel> {
    let total: f64 = sample.source_outcomes().iter().map(|&y| base.eval(y)).sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "ratio base sums to {total} over source outcomes; cannot normalize"
        )));
    }
    // pi / (total / n) == n1 / total
    let normalizer = sample.n1() as f64 / total;
    Ok(DensityRatioModel { base, normalizer })
}

/// Covariate transform applied before the linear predictor.
#[derive(Clone)]
pub enum FeatureMap {
    Identity,
    /// `[x1, exp(x2/2), x3/(1+exp(x2)) + 10]`.
    Misspecified,
    Custom { name: String, map: Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync> },
}

impl FeatureMap {
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            FeatureMap::Identity => Ok(x.to_vec()),
            FeatureMap::Misspecified => {
                if x.len() != 3 {
                    return Err(Error::InvalidArgument(format!(
                        "misspecified transform needs 3 covariates, got {}",
                        x.len()
                    )));
                }
                Ok(vec![x[0], (x[1] / 2.0).exp(), x[2] / (1.0 + x[1].exp()) + 10.0])
            }
            FeatureMap::Custom { map, .. } => Ok(map(x)),
        }
    }
}

impl fmt::Debug for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureMap::Identity => f.write_str("Identity"),
            FeatureMap::Misspecified => f.write_str("Misspecified"),
            FeatureMap::Custom { name, .. } => write!(f, "Custom({name})"),
        }
    }
}

/// Working model for the source conditional density of `Y` given `X`.
#[derive(Clone)]
pub enum ConditionalOutcomeModel {
    /// Normal with mean `(1, f(x)) . beta` and variance `sigma2`.
    GaussianLinear { beta: Vec<f64>, sigma2: f64, features: FeatureMap },
    /// Fully specified density `p(y | x)`, zero outside `support`.
    FixedDensity { density: Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>, support: (f64, f64) },
}

impl fmt::Debug for ConditionalOutcomeModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConditionalOutcomeModel::GaussianLinear { beta, sigma2, features } => f
                .debug_struct("GaussianLinear")
                .field("beta", beta)
                .field("sigma2", sigma2)
                .field("features", features)
                .finish(),
            ConditionalOutcomeModel::FixedDensity { support, .. } => {
                f.debug_struct("FixedDensity").field("support", support).finish()
            }
        }
    }
}

impl ConditionalOutcomeModel {
    pub fn gaussian_linear(beta: Vec<f64>, sigma2: f64, features: FeatureMap) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::InvalidArgument(format!("variance must be positive, got {sigma2}")));
        }
        if beta.is_empty() || beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidArgument("coefficients must be finite and include an intercept".into()));
        }
        Ok(ConditionalOutcomeModel::GaussianLinear { beta, sigma2, features })
    }

    pub fn fixed_density<F>(density: F, support: (f64, f64)) -> Result<Self>
    where
        F: Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    {
        if !(support.0 < support.1) {
            return Err(Error::InvalidArgument(format!("invalid support {support:?}")));
        }
        Ok(ConditionalOutcomeModel::FixedDensity { density: Arc::new(density), support })
    }

    /// Conditional mean (Gaussian-linear models only).
    pub fn mean(&self, x: &[f64]) -> Result<f64> {
        match self {
            ConditionalOutcomeModel::GaussianLinear { beta, features, .. } => {
                let f = features.apply(x)?;
                if f.len() + 1 != beta.len() {
                    return Err(Error::InvalidArgument(format!(
                        "{} features for {} coefficients",
                        f.len(),
                        beta.len()
                    )));
                }
                Ok(beta[0] + f.iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>())
            }
            ConditionalOutcomeModel::FixedDensity { .. } => {
                Err(Error::InvalidArgument("fixed densities expose no closed-form mean".into()))
            }
        }
    }

    pub fn variance(&self) -> Option<f64> {
        match self {
            ConditionalOutcomeModel::GaussianLinear { sigma2, .. } => Some(*sigma2),
            ConditionalOutcomeModel::FixedDensity { .. } => None,
        }
    }

    /// Density values `p(t_j | x)` at the rule's nodes.
    pub fn density_on_nodes(&self, x: &[f64], rule: &QuadratureRule) -> Result<Vec<f64>> {
        match self {
            ConditionalOutcomeModel::GaussianLinear { sigma2, .. } => {
                let mu = self.mean(x)?;
                let norm = 1.0 / (2.0 * PI * sigma2).sqrt();
                Ok(rule.nodes().iter().map(|&t| norm * (-(t - mu) * (t - mu) / (2.0 * sigma2)).exp()).collect())
            }
            ConditionalOutcomeModel::FixedDensity { density, support } => Ok(rule
                .nodes()
                .iter()
                .map(|&t| if t >= support.0 && t <= support.1 { density(t, x) } else { 0.0 })
                .collect()),
        }
    }
}

/// Least-squares fit of a Gaussian-linear model; `sigma2` uses the MLE
/// divisor `n1` and may be zero for noiseless data.
#[derive(Debug, Clone)]
pub struct GaussianLinearFit {
    pub beta: Vec<f64>,
    pub sigma2: f64,
    pub features: FeatureMap,
}

impl GaussianLinearFit {
    pub fn into_model(self) -> Result<ConditionalOutcomeModel> {
        ConditionalOutcomeModel::gaussian_linear(self.beta, self.sigma2, self.features)
    }
}

/// Regresses source outcomes on `(1, features(x))`.
pub fn fit_gaussian_linear(sample: &StackedSample, features: FeatureMap) -> Result<GaussianLinearFit> {
    let src = sample.source_indices();
    let rows: Vec<Vec<f64>> = src.iter().map(|&i| features.apply(sample.x(i))).collect::<Result<_>>()?;
    let p = rows.first().map_or(0, |r| r.len()) + 1;
    if src.len() <= p {
        return Err(Error::RankDeficient(format!("{} source units for {} coefficients", src.len(), p)));
    }
    let design = DMatrix::from_fn(src.len(), p, |i, j| if j == 0 { 1.0 } else { rows[i][j - 1] });
    let y = DVector::from_iterator(src.len(), src.iter().map(|&i| sample.y(i).expect("source outcome")));
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > smax * 1e-10) {
        return Err(Error::RankDeficient(format!("singular values range [{smin:e}, {smax:e}]")));
    }
    let beta = svd.solve(&y, 0.0).map_err(|e| Error::RankDeficient(e.to_string()))?;
    let resid = &y - &design * &beta;
    let sigma2 = resid.norm_squared() / src.len() as f64;
    Ok(GaussianLinearFit { beta: beta.iter().copied().collect(), sigma2, features })
}

/// Misspecified working model at its Kullback-Leibler projection constants.
pub fn misspecified_limit_model() -> ConditionalOutcomeModel {
    ConditionalOutcomeModel::gaussian_linear(
        vec![-7.000, -0.223, 0.363, 0.664],
        0.449,
        FeatureMap::Misspecified,
    )
    .expect("constant parameters are valid")
}

/// `int f(y) p(y|x) dy` on the rule, with the default mass check.
pub fn cond_expect<F: Fn(f64) -> f64>(
    model: &ConditionalOutcomeModel,
    integrand: F,
    x: &[f64],
    rule: &QuadratureRule,
) -> Result<f64> {
    cond_expect_with_floor(model, integrand, x, rule, Some(DEFAULT_MASS_FLOOR))
}

/// As [`cond_expect`]; `mass_floor = None` skips the truncation check.
pub fn cond_expect_with_floor<F: Fn(f64) -> f64>(
    model: &ConditionalOutcomeModel,
    integrand: F,
    x: &[f64],
    rule: &QuadratureRule,
    mass_floor: Option<f64>,
) -> Result<f64> {
    let dens = model.density_on_nodes(x, rule)?;
    check_mass(&dens, rule, mass_floor)?;
    let mut acc = 0.0;
    for ((&t, &w), &p) in rule.nodes().iter().zip(rule.weights()).zip(&dens) {
        let v = integrand(t);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("integrand at node {t}")));
        }
        acc += w * v * p;
    }
    Ok(acc)
}

pub(crate) fn check_mass(dens: &[f64], rule: &QuadratureRule, floor: Option<f64>) -> Result<f64> {
    let mass: f64 = dens.iter().zip(rule.weights()).map(|(p, w)| p * w).sum();
    if let Some(floor) = floor {
        if !(mass >= floor) {
            let (a, b) = rule.interval();
            return Err(Error::Truncation { mass, a, b, floor });
        }
    }
    Ok(mass)
}

/// Closed form `E{scale * exp(slope*Y) | x} = scale * exp(slope*mu + slope^2 sigma2 / 2)`
/// for Gaussian-linear models.
pub fn cond_expect_exp(model: &ConditionalOutcomeModel, scale: f64, slope: f64, x: &[f64]) -> Result<f64> {
    let sigma2 = model
        .variance()
        .ok_or_else(|| Error::InvalidArgument("closed form needs a Gaussian-linear model".into()))?;
    let mu = model.mean(x)?;
    Ok(scale * (slope * mu + 0.5 * slope * slope * sigma2).exp())
}

/// How `E{rho*^2 | x}` and `E{rho* | x}` are obtained for the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MomentMethod {
    /// On the quadrature rule; consistent with the discretized integral equation.
    #[default]
    Quadrature,
    /// Exponential-tilt moment generating function (Gaussian-linear models only).
    ClosedForm,
}

/// Source of the conditional expectations entering `w_i`.
pub enum WeightSource<'a> {
    Parametric {
        model: &'a ConditionalOutcomeModel,
        rule: &'a QuadratureRule,
        method: MomentMethod,
        mass_floor: Option<f64>,
    },
    Nonparametric(&'a NonparamRegressor),
}

fn inverse_weight(e2: f64, e1: f64, odds: f64) -> Result<f64> {
    let den = e2 + odds * e1;
    if !(den > 0.0 && den.is_finite()) {
        return Err(Error::NonFinite(format!(
            "weight denominator {den} (E[rho*^2|x] = {e2}, E[rho*|x] = {e1})"
        )));
    }
    Ok(1.0 / den)
}

/// `w_i = 1 / (E{rho*^2 | x_i} + pi/(1-pi) E{rho* | x_i})` for every unit.
pub fn weights_w(ratio: &DensityRatioModel, source: WeightSource<'_>, sample: &StackedSample) -> Result<Vec<f64>> {
    let odds = sample.pi() / sample.target_fraction();
    match source {
        WeightSource::Parametric { model, rule, method: MomentMethod::ClosedForm, .. } => {
            let (ls, b) = ratio
                .exp_tilt()
                .ok_or_else(|| Error::InvalidArgument("closed-form weights need an exponential-tilt ratio".into()))?;
            (0..sample.n())
                .map(|i| {
                    let x = sample.x(i);
                    let _ = rule;
                    let e2 = cond_expect_exp(model, (2.0 * ls).exp(), 2.0 * b, x)?;
                    let e1 = cond_expect_exp(model, ls.exp(), b, x)?;
                    inverse_weight(e2, e1, odds)
                })
                .collect()
        }
        WeightSource::Parametric { model, rule, method: MomentMethod::Quadrature, mass_floor } => {
            let rho: Vec<f64> = rule.nodes().iter().map(|&t| ratio.eval(t)).collect();
            (0..sample.n())
                .map(|i| {
                    let dens = model.density_on_nodes(sample.x(i), rule)?;
                    check_mass(&dens, rule, mass_floor)?;
                    let (mut e2, mut e1) = (0.0, 0.0);
                    for ((&w, &p), &r) in rule.weights().iter().zip(&dens).zip(&rho) {
                        e2 += w * p * r * r;
                        e1 += w * p * r;
                    }
                    inverse_weight(e2, e1, odds)
                })
                .collect()
        }
        WeightSource::Nonparametric(reg) => {
            let src = sample.source_indices();
            let rho: Vec<f64> = src.iter().map(|&i| ratio.eval(sample.y(i).expect("source outcome"))).collect();
            let rho2: Vec<f64> = rho.iter().map(|r| r * r).collect();
            let wm = reg.weight_matrix(sample)?;
            (0..sample.n())
                .map(|i| {
                    let row = wm.row(i);
                    let e2: f64 = row.iter().zip(&rho2).map(|(a, b)| a * b).sum();
                    let e1: f64 = row.iter().zip(&rho).map(|(a, b)| a * b).sum();
                    inverse_weight(e2, e1, odds)
                })
                .collect()
        }
    }
}

/// Product-kernel Nadaraya-Watson regressor over the source units, giving
/// `E^_p{a(Y) | x} = sum_k a(y_k) w_k(x)`.
#[derive(Debug, Clone)]
pub struct NonparamRegressor {
    spec: KernelSpec,
    /// Per-coordinate divisors (all ones unless standardized).
    scales: Vec<f64>,
    /// Scaled source covariates, row-major.
    centers: Vec<f64>,
    d: usize,
    standardize: bool,
}

impl NonparamRegressor {
    /// Bandwidth `scale * n1^(-1/(4+d))`; `standardize` divides each
    /// covariate by its source standard deviation first.
    pub fn new(sample: &StackedSample, family: KernelFamily, bandwidth_scale: f64, standardize: bool) -> Result<Self> {
        let h = default_bandwidth_multi(sample.n1(), sample.dim(), bandwidth_scale)?;
        Self::with_bandwidth(sample, KernelSpec::new(family, h)?, standardize)
    }

    pub fn with_bandwidth(sample: &StackedSample, spec: KernelSpec, standardize: bool) -> Result<Self> {
        let d = sample.dim();
        let src = sample.source_indices();
        let scales = if standardize {
            (0..d)
                .map(|k| {
                    let vals: Vec<f64> = src.iter().map(|&i| sample.x(i)[k]).collect();
                    let m = vals.iter().sum::<f64>() / vals.len() as f64;
                    let v = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
                    if v > 0.0 {
                        v.sqrt()
                    } else {
                        1.0
                    }
                })
                .collect()
        } else {
            vec![1.0; d]
        };
        let mut centers = Vec::with_capacity(src.len() * d);
        for &i in &src {
            centers.extend(sample.x(i).iter().zip(&scales).map(|(v, s)| v / s));
        }
        Ok(Self { spec, scales, centers, d, standardize })
    }

    /// Same kernel and bandwidth fitted to another sample.
    pub fn rebuild(&self, sample: &StackedSample) -> Result<Self> {
        Self::with_bandwidth(sample, self.spec, self.standardize)
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn n_source(&self) -> usize {
        self.centers.len() / self.d
    }

    /// Normalized weights `w_k(x)` over the source units.
    pub fn weights_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d {
            return Err(Error::InvalidArgument(format!("query has {} coordinates, expected {}", x.len(), self.d)));
        }
        let q: Vec<f64> = x.iter().zip(&self.scales).map(|(v, s)| v / s).collect();
        let mut diff = vec![0.0; self.d];
        let mut w: Vec<f64> = self
            .centers
            .chunks_exact(self.d)
            .map(|c| {
                for k in 0..self.d {
                    diff[k] = q[k] - c[k];
                }
                self.spec.product_weight(&diff)
            })
            .collect();
        let total: f64 = w.iter().sum();
        if !(total >= DENOMINATOR_FLOOR) {
            return Err(Error::DegenerateQuery { query: x.to_vec(), denominator: total });
        }
        w.iter_mut().for_each(|v| *v /= total);
        Ok(w)
    }

    /// `n x n1` matrix of weights `w_k(x_i)` for every unit of `sample`.
    pub fn weight_matrix(&self, sample: &StackedSample) -> Result<DMatrix<f64>> {
        let n1 = self.n_source();
        let rows: Vec<Vec<f64>> = (0..sample.n()).into_par_iter().map(|i| self.weights_at(sample.x(i))).collect::<Result<_>>()?;
        Ok(DMatrix::from_fn(sample.n(), n1, |i, k| rows[i][k]))
    }
}

/// `E^_p{v(Y) | x}` from values given on the source units (row order).
pub fn nonparam_cond_expect(regressor: &NonparamRegressor, values_on_source: &[f64], x: &[f64]) -> Result<f64> {
    if values_on_source.len() != regressor.n_source() {
        return Err(Error::InvalidArgument(format!(
            "{} values for {} source units",
            values_on_source.len(),
            regressor.n_source()
        )));
    }
    let w = regressor.weights_at(x)?;
    Ok(w.iter().zip(values_on_source).map(|(a, b)| a * b).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{nw_regress_1d, nw_regress_multi};
    use crate::sampling::{generate_design, true_conditional_model};

    fn tiny() -> StackedSample {
        StackedSample::new(vec![0.1, 0.2, 0.3], 1, vec![true, true, false], vec![Some(0.0), Some(2f64.ln()), None])
            .unwrap()
    }

    #[test]
    fn normalizer_identity_base() {
        let s = generate_design(50, 2).unwrap().sample;
        let m = normalize_ratio(RatioBase::constant(1.0), &s).unwrap();
        assert!((m.normalizer() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalizer_hand_value() {
        let m = normalize_ratio(RatioBase::exp_tilt(0.0, 1.0), &tiny()).unwrap();
        assert!((m.normalizer() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn normalizer_zero_base_fails() {
        assert!(normalize_ratio(RatioBase::custom(|_| 0.0), &tiny()).is_err());
    }

    #[test]
    fn normalization_identity_and_scale_invariance() {
        for seed in 0..5 {
            let s = generate_design(300, seed).unwrap().sample;
            let a = normalize_ratio(RatioBase::exp_tilt(-0.7, 1.2), &s).unwrap();
            let b = normalize_ratio(RatioBase::exp_tilt(-0.7 + 3.0f64.ln(), 1.2), &s).unwrap();
            let avg: f64 = s.source_outcomes().iter().map(|&y| a.eval(y)).sum::<f64>() / s.n() as f64;
            assert!((avg - s.pi()).abs() < 1e-12);
            for y in [-2.0, 0.0, 1.3] {
                assert!((a.eval(y) - b.eval(y)).abs() < 1e-12 * a.eval(y));
            }
        }
    }

    #[test]
    fn fit_exact_line() {
        let x = vec![0.0, 1.0, 2.0, 3.0, 4.0];
        let y: Vec<Option<f64>> = vec![Some(2.0), Some(5.0), Some(8.0), Some(11.0), None];
        let s = StackedSample::new(x, 1, vec![true, true, true, true, false], y).unwrap();
        let fit = fit_gaussian_linear(&s, FeatureMap::Identity).unwrap();
        assert!((fit.beta[0] - 2.0).abs() < 1e-12 && (fit.beta[1] - 3.0).abs() < 1e-12);
        assert!(fit.sigma2 < 1e-20);
    }

    #[test]
    fn fit_constant_outcome() {
        let x = vec![0.3, -1.0, 2.0, 0.5];
        let s = StackedSample::new(x, 1, vec![true, true, true, false], vec![Some(4.0), Some(4.0), Some(4.0), None])
            .unwrap();
        let fit = fit_gaussian_linear(&s, FeatureMap::Identity).unwrap();
        assert!((fit.beta[0] - 4.0).abs() < 1e-12 && fit.beta[1].abs() < 1e-12);
        assert!(fit.sigma2 < 1e-20);
    }

    #[test]
    fn fit_rank_deficient() {
        let x = vec![1.0, 1.0, 1.0, 1.0];
        let s = StackedSample::new(x, 1, vec![true, true, true, false], vec![Some(1.0), Some(2.0), Some(3.0), None])
            .unwrap();
        assert!(matches!(fit_gaussian_linear(&s, FeatureMap::Identity), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn fit_recovers_design_parameters() {
        let s = generate_design(100_000, 11).unwrap().sample;
        assert!(s.n1() > 48_000);
        let fit = fit_gaussian_linear(&s, FeatureMap::Identity).unwrap();
        for (b, t) in fit.beta.iter().zip([0.0, -0.2, 0.2, 0.4]) {
            assert!((b - t).abs() < 0.02, "{:?}", fit.beta);
        }
        assert!((fit.sigma2 - 0.4).abs() < 0.02);
    }

    #[test]
    fn misspecified_model_constants() {
        let m = misspecified_limit_model();
        assert!((m.mean(&[0.0, 0.0, 0.0]).unwrap() - 0.003).abs() < 1e-12);
        assert_eq!(m.variance(), Some(0.449));
        let f = FeatureMap::Misspecified.apply(&[0.7, 0.0, 3.0]).unwrap();
        assert_eq!(f, vec![0.7, 1.0, 11.5]);
    }

    #[test]
    fn cond_expect_examples() {
        let model = ConditionalOutcomeModel::gaussian_linear(vec![0.0, 1.0], 0.4, FeatureMap::Identity).unwrap();
        let wide = QuadratureRule::gauss_legendre(50, -8.0, 8.0).unwrap();
        let one = cond_expect(&model, |_| 1.0, &[0.0], &wide).unwrap();
        assert!((one - 1.0).abs() < 1e-6);
        let closed = cond_expect_exp(&model, 1.0, 1.0, &[0.0]).unwrap();
        assert!((closed - 0.2f64.exp()).abs() < 1e-15);
        assert!((closed - 1.22140).abs() < 1e-5);
        let rule = QuadratureRule::gauss_legendre(50, -5.0, 5.0).unwrap();
        let quad = cond_expect(&model, f64::exp, &[0.0], &rule).unwrap();
        assert!((quad - closed).abs() < 1e-8);
    }

    #[test]
    fn cond_expect_truncation() {
        let model = ConditionalOutcomeModel::gaussian_linear(vec![4.8, 0.0], 0.4, FeatureMap::Identity).unwrap();
        let rule = QuadratureRule::gauss_legendre(50, -5.0, 5.0).unwrap();
        let err = cond_expect(&model, |_| 1.0, &[0.0], &rule).unwrap_err();
        assert!(matches!(err, Error::Truncation { .. }));
        assert!(cond_expect_with_floor(&model, |_| 1.0, &[0.0], &rule, None).is_ok());
    }

    #[test]
    fn closed_form_vs_quadrature_on_design_models() {
        let x = [0.3, -0.4, 0.8];
        for model in [true_conditional_model(), misspecified_limit_model()] {
            let mu = model.mean(&x).unwrap();
            let sd = model.variance().unwrap().sqrt();
            let rule = QuadratureRule::gauss_legendre(50, mu - 8.0 * sd, mu + 8.0 * sd).unwrap();
            for s in [-1.0, 0.5, 1.2] {
                let a = cond_expect_exp(&model, 1.0, s, &x).unwrap();
                let b = cond_expect(&model, |y| (s * y).exp(), &x, &rule).unwrap();
                assert!((a - b).abs() < 1e-8, "s={s}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn weights_constant_ratio() {
        let s = StackedSample::new(vec![0.0, 1.0], 1, vec![true, false], vec![Some(0.2), None]).unwrap();
        let rule = QuadratureRule::gauss_legendre(50, -8.0, 8.0).unwrap();
        let model = ConditionalOutcomeModel::gaussian_linear(vec![0.0, 0.1], 0.3, FeatureMap::Identity).unwrap();
        for (c, expect) in [(1.0, 0.5), (2.0, 1.0 / 6.0)] {
            let ratio = DensityRatioModel::unnormalized(RatioBase::constant(c));
            for method in [MomentMethod::Quadrature, MomentMethod::ClosedForm] {
                let w = weights_w(
                    &ratio,
                    WeightSource::Parametric { model: &model, rule: &rule, method, mass_floor: None },
                    &s,
                )
                .unwrap();
                for v in w {
                    assert!((v - expect).abs() < 1e-9, "{v} vs {expect}");
                }
            }
            let reg = NonparamRegressor::new(&s, KernelFamily::Gaussian, 2.5, false).unwrap();
            for v in weights_w(&ratio, WeightSource::Nonparametric(&reg), &s).unwrap() {
                assert!((v - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weights_two_ways_at_origin() {
        let s = StackedSample::new(vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0], 3, vec![true, false], vec![Some(0.0), None])
            .unwrap();
        let ratio = DensityRatioModel::unnormalized(RatioBase::exp_tilt(-0.7, 1.2));
        for model in [true_conditional_model(), misspecified_limit_model()] {
            let mu = model.mean(&[0.0, 0.0, 0.0]).unwrap();
            let sd = model.variance().unwrap().sqrt();
            let rule = QuadratureRule::gauss_legendre(50, mu - 8.0 * sd, mu + 8.0 * sd).unwrap();
            let get = |method| {
                weights_w(&ratio, WeightSource::Parametric { model: &model, rule: &rule, method, mass_floor: None }, &s)
                    .unwrap()[0]
            };
            let (a, b) = (get(MomentMethod::ClosedForm), get(MomentMethod::Quadrature));
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn nonparam_reductions() {
        let s = generate_design(200, 5).unwrap().sample;
        let reg = NonparamRegressor::new(&s, KernelFamily::Gaussian, 2.5, false).unwrap();
        let c = vec![3.25; s.n1()];
        assert!((nonparam_cond_expect(&reg, &c, &[0.1, 0.2, 0.3]).unwrap() - 3.25).abs() < 1e-12);

        let ys = s.source_outcomes();
        let mask: Vec<bool> = s.indicators().to_vec();
        let h = reg.spec().bandwidth();
        let full_vals: Vec<f64> = (0..s.n()).map(|i| s.outcome(i).unwrap_or(0.0)).collect();
        let direct = nw_regress_multi(reg.spec(), s.covariates(), &full_vals, &mask, &[0.1, -0.3, 0.5]).unwrap();
        let via = nonparam_cond_expect(&reg, &ys, &[0.1, -0.3, 0.5]).unwrap();
        assert!((direct - via).abs() < 1e-12);

        // one covariate: agrees with the 1-D smoother
        let s1 = StackedSample::new(
            vec![0.0, 0.5, 1.5, 2.0],
            1,
            vec![true, true, true, false],
            vec![Some(1.0), Some(-1.0), Some(0.5), None],
        )
        .unwrap();
        let reg1 = NonparamRegressor::with_bandwidth(&s1, KernelSpec::gaussian(h).unwrap(), false).unwrap();
        let a = nonparam_cond_expect(&reg1, &[1.0, -1.0, 0.5], &[0.7]).unwrap();
        let b = nw_regress_1d(reg1.spec(), &[0.0, 0.5, 1.5], &[1.0, -1.0, 0.5], &[true; 3], 0.7).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn nonparam_large_sample_conditional_mean() {
        let s = generate_design(40_000, 21).unwrap().sample;
        let reg = NonparamRegressor::new(&s, KernelFamily::Gaussian, 2.5, false).unwrap();
        let v = nonparam_cond_expect(&reg, &s.source_outcomes(), &[-0.5, 0.5, 1.0]).unwrap();
        assert!((v - 0.6).abs() < 0.1, "{v}");
    }

    #[test]
    fn weights_positive_for_bounded_ratio() {
        let s = generate_design(200, 9).unwrap().sample;
        let ratio = normalize_ratio(RatioBase::exp_tilt(-0.7, 1.2), &s).unwrap();
        let rule = QuadratureRule::gauss_legendre(50, -5.0, 5.0).unwrap();
        let model = misspecified_limit_model();
        let w = weights_w(
            &ratio,
            WeightSource::Parametric { model: &model, rule: &rule, method: MomentMethod::Quadrature, mass_floor: None },
            &s,
        )
        .unwrap();
        assert!(w.iter().all(|&v| v > 0.0 && v.is_finite()));
    }
}
