//! Discretized first-kind integral equations `y~ = Phi (a . w)` and their
//! Landweber solution.
//!
//! The solver works in the eigenbasis of `D^(1/2) Phi^T Phi D^(1/2)`, with
//! `D = diag(w)`. Each Landweber step is then a diagonal update, so long runs
//! on large sample-point systems stay cheap while producing the same iterates
//! as the textbook recursion.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{KernelSpec, DENOMINATOR_FLOOR};
use crate::models::{check_mass, ConditionalOutcomeModel, DensityRatioModel};
use crate::quadrature::QuadratureRule;
use crate::sampling::StackedSample;

const DIVERGENCE_GROWTH: f64 = 1e3;
const RESIDUAL_BLOWUP: f64 = 1e6;

/// Landweber settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Step size; `None` means `1/l`.
    pub step: Option<f64>,
    /// Threshold on `||a_{k+1} - a_k||^2 / ||a_k||^2`.
    pub tol: f64,
    pub max_iter: usize,
    /// Caps the step at `1/lambda_max(D^(1/2) Phi^T Phi D^(1/2))`.
    pub spectral_guard: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { step: None, tol: 1e-12, max_iter: 10_000_000, spectral_guard: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub iterations: usize,
    pub final_rel_change: f64,
    pub final_residual_norm: f64,
    pub converged: bool,
    pub step: f64,
    /// Extreme eigenvalues of `D^(1/2) Phi^T Phi D^(1/2)`, i.e. squared
    /// extreme singular values of `Phi diag(sqrt w)`.
    pub lambda_min: f64,
    pub lambda_max: f64,
}

#[derive(Debug)]
struct Spectral {
    q: DMatrix<f64>,
    lambda: DVector<f64>,
    /// `Q^T D^-1 Q`, absent when all weights are equal.
    metric: Option<DMatrix<f64>>,
    lambda_min: f64,
    lambda_max: f64,
}

/// `Phi` (l x m), right-hand side `y~` (length l) and quadrature weights
/// (length m).
#[derive(Debug, Clone)]
pub struct DiscretizedFredholm {
    phi: DMatrix<f64>,
    target: DVector<f64>,
    quad_weights: DVector<f64>,
    pub config: SolverConfig,
    eval_points: Vec<f64>,
    smoother: Option<Arc<DMatrix<f64>>>,
    spectral: Arc<OnceLock<Spectral>>,
}

impl DiscretizedFredholm {
    pub fn new(phi: DMatrix<f64>, target: Vec<f64>, quad_weights: Vec<f64>) -> Result<Self> {
        let (l, m) = phi.shape();
        if l == 0 || m == 0 {
            return Err(Error::InvalidArgument("kernel matrix must be non-empty".into()));
        }
        if target.len() != l || quad_weights.len() != m {
            return Err(Error::InvalidArgument(format!(
                "kernel is {l}x{m} but target has {} and weights {} entries",
                target.len(),
                quad_weights.len()
            )));
        }
        if phi.iter().chain(&target).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kernel matrix or target".into()));
        }
        if quad_weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument("quadrature weights must be positive".into()));
        }
        Ok(Self {
            phi,
            target: DVector::from_vec(target),
            quad_weights: DVector::from_vec(quad_weights),
            config: SolverConfig::default(),
            eval_points: Vec::new(),
            smoother: None,
            spectral: Arc::new(OnceLock::new()),
        })
    }

    pub fn with_config(mut self, config: SolverConfig) -> Self {
        self.config = config;
        self
    }

    /// Same operator with a new right-hand side; the spectral decomposition
    /// is shared.
    pub fn with_target(&self, target: Vec<f64>) -> Result<Self> {
        if target.len() != self.phi.nrows() {
            return Err(Error::InvalidArgument(format!(
                "target has {} entries, expected {}",
                target.len(),
                self.phi.nrows()
            )));
        }
        if target.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("target".into()));
        }
        let mut out = self.clone();
        out.target = DVector::from_vec(target);
        Ok(out)
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn target(&self) -> &[f64] {
        self.target.as_slice()
    }

    pub fn quad_weights(&self) -> &[f64] {
        self.quad_weights.as_slice()
    }

    pub fn rows(&self) -> usize {
        self.phi.nrows()
    }

    pub fn cols(&self) -> usize {
        self.phi.ncols()
    }

    /// Outcome values at which the equation is evaluated (builders only).
    pub fn eval_points(&self) -> &[f64] {
        &self.eval_points
    }

    /// Normalized outcome-kernel weights `N[i,k]` of the evaluation points
    /// over the source units (builders only).
    pub fn smoother(&self) -> Option<&DMatrix<f64>> {
        self.smoother.as_deref()
    }

    fn spectral(&self) -> &Spectral {
        self.spectral.get_or_init(|| {
            let sqrt_w = self.quad_weights.map(f64::sqrt);
            let mut scaled = self.phi.clone();
            for (j, mut col) in scaled.column_iter_mut().enumerate() {
                col *= sqrt_w[j];
            }
            let m = scaled.tr_mul(&scaled);
            let eig = m.symmetric_eigen();
            let lambda = eig.eigenvalues.map(|v| v.max(0.0));
            let lambda_max = lambda.max();
            let lambda_min = lambda.min();
            let w0 = self.quad_weights[0];
            let uniform = self.quad_weights.iter().all(|&w| w == w0);
            let metric = (!uniform).then(|| {
                let mut qd = eig.eigenvectors.clone();
                for (i, mut row) in qd.row_iter_mut().enumerate() {
                    row /= self.quad_weights[i];
                }
                eig.eigenvectors.tr_mul(&qd)
            });
            Spectral { q: eig.eigenvectors, lambda, metric, lambda_min, lambda_max }
        })
    }

    /// Squared extreme singular values of `Phi diag(sqrt w)`.
    pub fn spectral_range(&self) -> (f64, f64) {
        let s = self.spectral();
        (s.lambda_min, s.lambda_max)
    }

    /// `||Phi (a . w) - y~||`.
    pub fn residual_norm(&self, a: &[f64]) -> f64 {
        let aw = DVector::from_iterator(a.len(), a.iter().zip(self.quad_weights.iter()).map(|(a, w)| a * w));
        (&self.phi * aw - &self.target).norm()
    }
}

/// Landweber iteration `a_{k+1} = a_k + s Phi^T (y~ - Phi (a_k . w))` from `a0`.
///
/// Stops when the relative change drops to `tol` (absolute when `a_k = 0`)
/// or after `max_iter` steps. Growth of the relative change by more than a
/// factor 1e3 over its running minimum, or an exploding residual, is
/// reported as divergence.
pub fn landweber_solve(problem: &DiscretizedFredholm, a0: &[f64]) -> Result<(Vec<f64>, SolveDiagnostics)> {
    solve_impl(problem, a0, true)
}

fn solve_impl(
    problem: &DiscretizedFredholm,
    a0: &[f64],
    closed_form: bool,
) -> Result<(Vec<f64>, SolveDiagnostics)> {
    let m = problem.cols();
    if a0.len() != m {
        return Err(Error::InvalidArgument(format!("start has {} entries, expected {m}", a0.len())));
    }
    let cfg = problem.config;
    if !(cfg.tol > 0.0) || cfg.max_iter == 0 {
        return Err(Error::InvalidArgument("tolerance and iteration cap must be positive".into()));
    }
    let sp = problem.spectral();
    let mut step = cfg.step.unwrap_or(1.0 / problem.rows() as f64);
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    if cfg.spectral_guard && sp.lambda_max > 0.0 {
        step = step.min(1.0 / (sp.lambda_max * (1.0 + 1e-12)));
    }

    let w = &problem.quad_weights;
    let sqrt_w = w.map(f64::sqrt);
    // g^ = Q^T D^(1/2) Phi^T y~, c = Q^T D^(1/2) a
    let g = problem.phi.tr_mul(&problem.target).component_mul(&sqrt_w);
    let ghat = sp.q.tr_mul(&g);
    let b0 = DVector::from_iterator(m, a0.iter().zip(sqrt_w.iter()).map(|(a, s)| a * s));
    let c = sp.q.tr_mul(&b0);
    let uniform = w[0];
    let sq_norm_a = |v: &DVector<f64>| match &sp.metric {
        None => v.norm_squared() / uniform,
        Some(metric) => v.dot(&(metric * v)),
    };
    let y2 = problem.target.norm_squared();
    let residual2 = |c: &DVector<f64>| {
        y2 - 2.0 * c.dot(&ghat) + c.iter().zip(sp.lambda.iter()).map(|(c, l)| l * c * c).sum::<f64>()
    };
    let reference2 = residual2(&c).max(y2).max(f64::MIN_POSITIVE);

    let diag = |a: &[f64], iterations: usize, rel: f64, converged: bool| SolveDiagnostics {
        iterations,
        final_rel_change: rel,
        final_residual_norm: problem.residual_norm(a),
        converged,
        step,
        lambda_min: sp.lambda_min,
        lambda_max: sp.lambda_max,
    };

    // Every mode contracts monotonically when s*lambda <= 1, so iterate k is
    // available in closed form and the stopping index can be searched for.
    if closed_form && sp.lambda.iter().all(|&l| step * l <= 1.0) {
        let x: Vec<f64> = sp.lambda.iter().map(|&l| step * l).collect();
        let log_rho: Vec<f64> = x.iter().map(|&x| (-x).ln_1p()).collect();
        let d = DVector::from_iterator(m, (0..m).map(|j| step * ghat[j] - x[j] * c[j]));
        let c0 = c.clone();
        let iterate = |k: usize| -> DVector<f64> {
            if k == 0 {
                return c0.clone();
            }
            let kf = k as f64;
            DVector::from_iterator(
                m,
                (0..m).map(|j| {
                    let lr = kf * log_rho[j];
                    let sum = if x[j] == 0.0 { kf } else { -lr.exp_m1() / x[j] };
                    lr.exp() * c0[j] + step * ghat[j] * sum
                }),
            )
        };
        let increment = |k: usize| -> DVector<f64> {
            if k == 0 {
                return d.clone();
            }
            let kf = k as f64;
            DVector::from_iterator(m, (0..m).map(|j| (kf * log_rho[j]).exp() * d[j]))
        };
        // criterion checked when iterate k+1 is formed
        let check = |k: usize| -> (bool, f64) {
            let prev = sq_norm_a(&iterate(k));
            let change = sq_norm_a(&increment(k));
            if prev == 0.0 {
                (change <= cfg.tol, change)
            } else {
                let rel = change / prev;
                (rel <= cfg.tol, rel)
            }
        };
        let last = cfg.max_iter - 1;
        let (ok0, rel0) = check(0);
        let stop = if ok0 {
            Some((0, rel0))
        } else {
            let mut lo = 0;
            let mut hi = None;
            let mut probe = 1;
            loop {
                let k = probe.min(last);
                let (ok, rel) = check(k);
                if !rel.is_finite() {
                    let a = recover(sp, &iterate(k + 1), &sqrt_w);
                    return Err(Error::Divergence(diag(&a, k + 1, rel, false)));
                }
                if ok {
                    hi = Some((k, rel));
                    break;
                }
                lo = k;
                if k == last {
                    break;
                }
                probe = probe.saturating_mul(2);
            }
            hi.map(|(mut hi, mut hi_rel)| {
                while hi - lo > 1 {
                    let mid = lo + (hi - lo) / 2;
                    let (ok, rel) = check(mid);
                    if ok {
                        hi = mid;
                        hi_rel = rel;
                    } else {
                        lo = mid;
                    }
                }
                (hi, hi_rel)
            })
        };
        return Ok(match stop {
            Some((k, rel)) => {
                let a = recover(sp, &iterate(k + 1), &sqrt_w);
                let dg = diag(&a, k + 1, rel, true);
                (a, dg)
            }
            None => {
                let (_, rel) = check(last);
                let a = recover(sp, &iterate(cfg.max_iter), &sqrt_w);
                let dg = diag(&a, cfg.max_iter, rel, false);
                (a, dg)
            }
        });
    }
    sequential(problem, c, step, &ghat, &sqrt_w, reference2, diag)
}

fn sequential(
    problem: &DiscretizedFredholm,
    mut c: DVector<f64>,
    step: f64,
    ghat: &DVector<f64>,
    sqrt_w: &DVector<f64>,
    reference2: f64,
    diag: impl Fn(&[f64], usize, f64, bool) -> SolveDiagnostics,
) -> Result<(Vec<f64>, SolveDiagnostics)> {
    let cfg = problem.config;
    let sp = problem.spectral();
    let m = problem.cols();
    let uniform = problem.quad_weights[0];
    let sq_norm_a = |v: &DVector<f64>| match &sp.metric {
        None => v.norm_squared() / uniform,
        Some(metric) => v.dot(&(metric * v)),
    };
    let y2 = problem.target.norm_squared();
    let residual2 = |c: &DVector<f64>| {
        y2 - 2.0 * c.dot(ghat) + c.iter().zip(sp.lambda.iter()).map(|(c, l)| l * c * c).sum::<f64>()
    };
    let mut delta = DVector::zeros(m);
    let mut min_rel = f64::INFINITY;
    let mut rel = f64::NAN;
    let mut converged = false;
    let mut iterations = 0;
    for k in 0..cfg.max_iter {
        for j in 0..m {
            delta[j] = step * (ghat[j] - sp.lambda[j] * c[j]);
        }
        let prev = sq_norm_a(&c);
        c += &delta;
        iterations = k + 1;
        let change = sq_norm_a(&delta);
        let done = if prev == 0.0 {
            rel = change;
            change <= cfg.tol
        } else {
            rel = change / prev;
            rel <= cfg.tol
        };
        if done {
            converged = true;
            break;
        }
        let blown = residual2(&c) > RESIDUAL_BLOWUP * RESIDUAL_BLOWUP * reference2;
        if !rel.is_finite() || rel > DIVERGENCE_GROWTH * min_rel || blown {
            let a = recover(sp, &c, sqrt_w);
            return Err(Error::Divergence(diag(&a, iterations, rel, false)));
        }
        if prev > 0.0 {
            min_rel = min_rel.min(rel);
        }
    }
    let a = recover(sp, &c, sqrt_w);
    let dg = diag(&a, iterations, rel, converged);
    Ok((a, dg))
}

fn recover(sp: &Spectral, c: &DVector<f64>, sqrt_w: &DVector<f64>) -> Vec<f64> {
    let b = &sp.q * c;
    b.iter().zip(sqrt_w.iter()).map(|(b, s)| b / s).collect()
}

/// Distinct source outcomes in ascending order.
pub fn evaluation_points(sample: &StackedSample) -> Vec<f64> {
    let mut ys = sample.source_outcomes();
    ys.sort_by(f64::total_cmp);
    ys.dedup();
    ys
}

/// Row-normalized kernel weights `K_h(e_i - y_k) / sum_k K_h(e_i - y_k)` of
/// evaluation points `e` over source outcomes `y`.
pub fn outcome_smoother(spec: &KernelSpec, eval_points: &[f64], source_y: &[f64]) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = eval_points
        .par_iter()
        .map(|&e| {
            let mut row: Vec<f64> = source_y.iter().map(|&y| spec.weight(e - y)).collect();
            let total: f64 = row.iter().sum();
            if !(total >= DENOMINATOR_FLOOR) {
                return Err(Error::DegenerateQuery { query: vec![e], denominator: total });
            }
            row.iter_mut().for_each(|v| *v /= total);
            Ok(row)
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(eval_points.len(), source_y.len(), |i, k| rows[i][k]))
}

/// Quadrature discretization of the doubly flexible equation
/// `E{ rho*(Y) w(X) E*{a(Y) rho*(Y) | X} | y, source } = y`:
/// `Phi[i,j] = rho*(t_j) sum_k N[i,k] w_k p*(t_j | x_k)` over source units `k`,
/// evaluation points the distinct source outcomes, and target `y~ = e`.
///
/// `weights` holds `w_i` for every unit of the sample.
pub fn build_doubly_kernel(
    sample: &StackedSample,
    ratio: &DensityRatioModel,
    model: &ConditionalOutcomeModel,
    weights: &[f64],
    spec: &KernelSpec,
    rule: &QuadratureRule,
    mass_floor: Option<f64>,
) -> Result<DiscretizedFredholm> {
    check_weights(sample, weights)?;
    let src = sample.source_indices();
    let eval = evaluation_points(sample);
    let smoother = outcome_smoother(spec, &eval, &sample.source_outcomes())?;
    let rho: Vec<f64> = rule.nodes().iter().map(|&t| ratio.eval(t)).collect();
    let rows: Vec<Vec<f64>> = src
        .par_iter()
        .map(|&i| {
            let dens = model.density_on_nodes(sample.x(i), rule)?;
            check_mass(&dens, rule, mass_floor)?;
            Ok(dens.iter().zip(&rho).map(|(p, r)| weights[i] * p * r).collect())
        })
        .collect::<Result<_>>()?;
    let p = DMatrix::from_fn(src.len(), rule.len(), |k, j| rows[k][j]);
    let phi = &smoother * p;
    let mut problem = DiscretizedFredholm::new(phi, eval.clone(), rule.weights().to_vec())?;
    problem.eval_points = eval;
    problem.smoother = Some(Arc::new(smoother));
    Ok(problem)
}

/// Sample-point discretization of the singly flexible equation, with
/// unknowns `a(y_k)` at the source outcomes and unit weights:
/// `Phi[i,k] = rho*(y_k) sum_u N[i,u] w_u W[u,k]`, where `W[u,k]` is the
/// covariate-kernel weight of source unit `k` at `x_u`.
///
/// `source_weights` is the `n1 x n1` block of covariate-kernel weights over
/// the source rows; `weights` holds `w_i` for every unit.
pub fn build_singly_kernel(
    sample: &StackedSample,
    ratio: &DensityRatioModel,
    source_weights: &DMatrix<f64>,
    weights: &[f64],
    spec: &KernelSpec,
) -> Result<DiscretizedFredholm> {
    check_weights(sample, weights)?;
    let n1 = sample.n1();
    if source_weights.shape() != (n1, n1) {
        return Err(Error::InvalidArgument(format!(
            "source weight block is {:?}, expected {n1}x{n1}",
            source_weights.shape()
        )));
    }
    let ys = sample.source_outcomes();
    let src = sample.source_indices();
    let eval = evaluation_points(sample);
    let smoother = outcome_smoother(spec, &eval, &ys)?;
    let mut inner = source_weights.clone();
    for (u, mut row) in inner.row_iter_mut().enumerate() {
        row *= weights[src[u]];
    }
    for (k, mut col) in inner.column_iter_mut().enumerate() {
        col *= ratio.eval(ys[k]);
    }
    let phi = &smoother * inner;
    let mut problem = DiscretizedFredholm::new(phi, eval.clone(), vec![1.0; n1])?;
    problem.eval_points = eval;
    problem.smoother = Some(Arc::new(smoother));
    Ok(problem)
}

fn check_weights(sample: &StackedSample, weights: &[f64]) -> Result<()> {
    if weights.len() != sample.n() {
        return Err(Error::InvalidArgument(format!("{} weights for {} units", weights.len(), sample.n())));
    }
    Ok(())
}
