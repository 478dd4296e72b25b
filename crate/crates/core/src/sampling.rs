//! The stacked two-population sample, CSV ingestion/export, the synthetic
//! simulation design and the discrete non-identifiability example.
//!
//! Units with `r = 1` come from the source population and carry an outcome;
//! units with `r = 0` come from the target population and only carry
//! covariates. Absent outcomes are stored as `None` and every accessor that
//! would do arithmetic on them returns [`Error::AbsentOutcome`].

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::models::{ConditionalOutcomeModel, FeatureMap};

/// Pooled sample of both populations.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedSample {
    x: Vec<f64>,
    d: usize,
    r: Vec<bool>,
    y: Vec<Option<f64>>,
    n1: usize,
    n0: usize,
    pi: f64,
}

impl StackedSample {
    /// Builds a sample from row-major covariates. `y[i]` must be present
    /// exactly when `r[i]` is true.
    pub fn new(x: Vec<f64>, d: usize, r: Vec<bool>, y: Vec<Option<f64>>) -> Result<Self> {
        let n = r.len();
        if d == 0 {
            return Err(Error::Schema("at least one covariate column is required".into()));
        }
        if x.len() != n * d || y.len() != n {
            return Err(Error::InvalidArgument(format!(
                "length mismatch: {} covariate entries, {} indicators, {} outcomes (d = {d})",
                x.len(),
                n,
                y.len()
            )));
        }
        if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("covariate of unit {}", pos / d)));
        }
        for (i, (&ri, yi)) in r.iter().zip(&y).enumerate() {
            match (ri, yi) {
                (true, None) => {
                    return Err(Error::Consistency(format!("unit {i} has r = 1 but no outcome")))
                }
                (false, Some(_)) => {
                    return Err(Error::Consistency(format!("unit {i} has r = 0 but an outcome")))
                }
                (true, Some(v)) if !v.is_finite() => {
                    return Err(Error::NonFinite(format!("outcome of unit {i}")))
                }
                _ => {}
            }
        }
        let n1 = r.iter().filter(|&&v| v).count();
        let n0 = n - n1;
        if n1 == 0 || n0 == 0 {
            return Err(Error::Consistency(format!(
                "both populations must be present (n1 = {n1}, n0 = {n0})"
            )));
        }
        Ok(Self { x, d, r, y, n1, n0, pi: n1 as f64 / n as f64 })
    }

    pub fn n(&self) -> usize {
        self.r.len()
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    pub fn n0(&self) -> usize {
        self.n0
    }

    /// Source fraction `n1 / n`.
    pub fn pi(&self) -> f64 {
        self.pi
    }

    /// Target fraction `n0 / n`, used in place of `1 - pi` so that
    /// `n^-1 sum (1 - r_i) / (1 - pi) = 1` holds exactly.
    pub fn target_fraction(&self) -> f64 {
        self.n0 as f64 / self.n() as f64
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn covariates(&self) -> &[f64] {
        &self.x
    }

    pub fn r(&self, i: usize) -> bool {
        self.r[i]
    }

    pub fn indicators(&self) -> &[bool] {
        &self.r
    }

    pub fn outcome(&self, i: usize) -> Option<f64> {
        self.y[i]
    }

    /// Outcome of a source unit; absent outcomes are an error.
    pub fn y(&self, i: usize) -> Result<f64> {
        self.y[i].ok_or(Error::AbsentOutcome(i))
    }

    /// Indices of source units, in row order.
    pub fn source_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.r[i]).collect()
    }

    /// Indices of target units, in row order.
    pub fn target_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| !self.r[i]).collect()
    }

    /// Outcomes of the source units, in row order.
    pub fn source_outcomes(&self) -> Vec<f64> {
        self.y.iter().flatten().copied().collect()
    }

    /// Sub-sample made of the listed rows (repetitions allowed).
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let mut x = Vec::with_capacity(rows.len() * self.d);
        for &i in rows {
            x.extend_from_slice(self.x(i));
        }
        Self::new(
            x,
            self.d,
            rows.iter().map(|&i| self.r[i]).collect(),
            rows.iter().map(|&i| self.y[i]).collect(),
        )
    }

    /// Writes the sample as CSV with columns `r,y,x1..xd`, plus `y_hidden`
    /// when hidden target outcomes are supplied (one per target unit, in row
    /// order).
    pub fn write_csv<W: Write>(&self, out: W, hidden: Option<&[f64]>) -> Result<()> {
        if let Some(h) = hidden {
            if h.len() != self.n0 {
                return Err(Error::InvalidArgument(format!(
                    "{} hidden outcomes for {} target units",
                    h.len(),
                    self.n0
                )));
            }
        }
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["r".to_string(), "y".to_string()];
        header.extend((1..=self.d).map(|k| format!("x{k}")));
        if hidden.is_some() {
            header.push("y_hidden".into());
        }
        w.write_record(&header)?;
        let mut next_hidden = 0;
        for i in 0..self.n() {
            let mut rec = Vec::with_capacity(header.len());
            rec.push(if self.r[i] { "1".to_string() } else { "0".to_string() });
            rec.push(self.y[i].map(|v| v.to_string()).unwrap_or_default());
            rec.extend(self.x(i).iter().map(|v| v.to_string()));
            if let Some(h) = hidden {
                if self.r[i] {
                    rec.push(String::new());
                } else {
                    rec.push(h[next_hidden].to_string());
                    next_hidden += 1;
                }
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Column names used when reading a sample from CSV.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub indicator: String,
    pub outcome: String,
    /// Covariate columns; `None` selects every column named `x<k>`, ordered by `k`.
    pub covariates: Option<Vec<String>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self { indicator: "r".into(), outcome: "y".into(), covariates: None }
    }
}

/// Reads a stacked sample with the default `r,y,x1..xd` schema.
pub fn load_csv<R: Read>(input: R) -> Result<StackedSample> {
    load_csv_with_schema(input, &CsvSchema::default())
}

pub fn load_csv_with_schema<R: Read>(input: R, schema: &CsvSchema) -> Result<StackedSample> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let r_col = col(&schema.indicator)?;
    let y_col = col(&schema.outcome)?;
    let x_cols: Vec<usize> = match &schema.covariates {
        Some(names) => names.iter().map(|n| col(n)).collect::<Result<_>>()?,
        None => {
            let mut found: Vec<(usize, usize)> = headers
                .iter()
                .enumerate()
                .filter_map(|(pos, h)| {
                    h.strip_prefix('x').and_then(|k| k.parse::<usize>().ok()).map(|k| (k, pos))
                })
                .collect();
            found.sort_unstable();
            for (expected, &(k, _)) in (1..).zip(&found) {
                if k != expected {
                    return Err(Error::Schema(format!("covariate columns must be x1..xd, found x{k}")));
                }
            }
            found.into_iter().map(|(_, pos)| pos).collect()
        }
    };
    if x_cols.is_empty() {
        return Err(Error::Schema("no covariate columns".into()));
    }

    let d = x_cols.len();
    let (mut x, mut r, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = row + 1;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let ri = match field(r_col) {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Malformed { row, msg: format!("indicator must be 0 or 1, got `{other}`") })
            }
        };
        let yi = match field(y_col) {
            "" => None,
            s => Some(s.parse::<f64>().map_err(|e| Error::Malformed { row, msg: format!("outcome `{s}`: {e}") })?),
        };
        match (ri, yi) {
            (true, None) => return Err(Error::Consistency(format!("row {row}: r = 1 with absent outcome"))),
            (false, Some(_)) => return Err(Error::Consistency(format!("row {row}: outcome present with r = 0"))),
            _ => {}
        }
        for &c in &x_cols {
            let s = field(c);
            x.push(s.parse::<f64>().map_err(|e| Error::Malformed { row, msg: format!("covariate `{s}`: {e}") })?);
        }
        r.push(ri);
        y.push(yi);
    }
    StackedSample::new(x, d, r, y)
}

/// A generated sample together with the hidden target outcomes and the
/// analytic truth of the generating design.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub sample: StackedSample,
    /// Target-population outcomes, one per `r = 0` unit in row order.
    pub hidden_target_y: Vec<f64>,
    pub truth: Truth,
}

impl SyntheticSample {
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let targets = self.sample.target_indices();
        let mut slot = vec![usize::MAX; self.sample.n()];
        for (k, &i) in targets.iter().enumerate() {
            slot[i] = k;
        }
        let hidden = rows.iter().filter(|&&i| !self.sample.r(i)).map(|&i| self.hidden_target_y[slot[i]]).collect();
        Ok(Self { sample: self.sample.subset(rows)?, hidden_target_y: hidden, truth: self.truth })
    }
}

/// Target-population truth of the simulation design: outcomes are `N(1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Truth {
    pub theta_mean: f64,
    target_sd: f64,
}

impl Truth {
    /// `t`-th quantile of the target outcome distribution.
    pub fn quantile(&self, t: f64) -> f64 {
        let z = Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(t);
        self.theta_mean + self.target_sd * z
    }
}

/// Simulation design: `R ~ Bernoulli(source_prob)`, `Y | R=1 ~ N(0,1)`,
/// `Y | R=0 ~ N(1,1)`, `X | Y ~ N((-0.5, 0.5, 1) Y, I_3)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationDesign {
    pub source_prob: f64,
}

impl Default for SimulationDesign {
    fn default() -> Self {
        Self { source_prob: 0.5 }
    }
}

const LOADINGS: [f64; 3] = [-0.5, 0.5, 1.0];

impl SimulationDesign {
    pub fn generate(&self, n: usize, seed: u64) -> Result<SyntheticSample> {
        if n < 10 {
            return Err(Error::InvalidArgument(format!("n must be at least 10, got {n}")));
        }
        if !(self.source_prob > 0.0 && self.source_prob < 1.0) {
            return Err(Error::InvalidArgument(format!("source probability {} not in (0,1)", self.source_prob)));
        }
        // Degenerate draws (one population empty) are redrawn with the next seed.
        let mut attempt_seed = seed;
        loop {
            if let Some(s) = self.draw(n, attempt_seed)? {
                return Ok(s);
            }
            attempt_seed = attempt_seed.wrapping_add(1);
        }
    }

    fn draw(&self, n: usize, seed: u64) -> Result<Option<SyntheticSample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::with_capacity(3 * n);
        let mut r = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        let mut hidden = Vec::new();
        for _ in 0..n {
            let is_source = rng.random::<f64>() < self.source_prob;
            let z: f64 = rng.sample(StandardNormal);
            let yi = if is_source { z } else { 1.0 + z };
            for load in LOADINGS {
                let e: f64 = rng.sample(StandardNormal);
                x.push(load * yi + e);
            }
            r.push(is_source);
            if is_source {
                y.push(Some(yi));
            } else {
                y.push(None);
                hidden.push(yi);
            }
        }
        let n1 = r.iter().filter(|&&v| v).count();
        if n1 == 0 || n1 == n {
            return Ok(None);
        }
        Ok(Some(SyntheticSample {
            sample: StackedSample::new(x, 3, r, y)?,
            hidden_target_y: hidden,
            truth: Truth { theta_mean: 1.0, target_sd: 1.0 },
        }))
    }
}

/// Draws the simulation design with the default source probability 0.5.
pub fn generate_design(n: usize, seed: u64) -> Result<SyntheticSample> {
    SimulationDesign::default().generate(n, seed)
}

/// True outcome density ratio of the simulation design, `exp(y - 0.5)`.
pub fn true_density_ratio(y: f64) -> f64 {
    (-0.5 + y).exp()
}

/// Source conditional `Y | X` of the simulation design: Gaussian with mean
/// `(1, x) . (0, -0.2, 0.2, 0.4)` and variance 0.4.
pub fn true_conditional_model() -> ConditionalOutcomeModel {
    ConditionalOutcomeModel::gaussian_linear(vec![0.0, -0.2, 0.2, 0.4], 0.4, FeatureMap::Identity)
        .expect("constant parameters are valid")
}

/// SplitMix64 finalizer applied to `seed ^ golden * (index + 1)`; used to
/// derive independent per-replicate and per-resample seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Discrete three-outcome example in which the target outcome marginal is
/// not identified from the observed-data distribution.
pub mod identifiability {
    use crate::error::{Error, Result};

    /// `pr(X = 0 | Y = y)` for `y = 0, 1, 2`.
    pub const PR_X0_GIVEN_Y: [f64; 3] = [1.0 / 5.0, 1.0 / 8.0, 2.0 / 3.0];
    /// Source marginal `p_Y`.
    pub const SOURCE_MARGINAL: [f64; 3] = [5.0 / 16.0, 1.0 / 2.0, 3.0 / 16.0];
    pub const T_LOWER: f64 = 1.0 / 32.0;
    pub const T_UPPER: f64 = 25.0 / 336.0;

    fn check(t: f64) -> Result<()> {
        if t > T_LOWER && t < T_UPPER {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("t = {t} outside ({T_LOWER}, {T_UPPER})")))
        }
    }

    /// Target marginal `q_Y(.; t)`. The entries always sum to one; the first
    /// is negative for `t > 25/416`, so only `t < 25/416` gives a proper
    /// distribution.
    pub fn target_marginal(t: f64) -> Result<[f64; 3]> {
        check(t)?;
        Ok([5.0 * (25.0 - 416.0 * t) / 336.0, (32.0 * t - 1.0) / 6.0, (89.0 + 96.0 * t) / 112.0])
    }

    /// `pr(X = 0)` in the target population; equals 7/12 for every admissible `t`.
    pub fn example1_target_marginal(t: f64) -> Result<f64> {
        let q = target_marginal(t)?;
        Ok(PR_X0_GIVEN_Y.iter().zip(q).map(|(g, qy)| g * qy).sum())
    }
}

pub use identifiability::example1_target_marginal;
