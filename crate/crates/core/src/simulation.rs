//! Monte Carlo study on the synthetic design: runs the seven estimators on
//! replicated samples and aggregates bias, variability and coverage.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{
    estimate, oracle, Estimand, EstimateResult, EstimatorConfig, EstimatorSpec, OutcomeModelSpec, RatioSpec,
    RegressorSpec,
};
use crate::models::{misspecified_limit_model, DensityRatioModel, FeatureMap, RatioBase};
use crate::sampling::{mix_seed, SimulationDesign, SyntheticSample};

/// Largest tolerated share of failed replicates per estimator and target.
pub const MAX_FAILURE_RATE: f64 = 0.05;

/// The seven estimators of the study. `Mis` variants use the misspecified
/// ratio `exp(-0.7 + 1.2 y)`; `True` variants use the true ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EstimatorId {
    ShiftDependentMis,
    DoublyMis,
    SinglyMis,
    ShiftDependentTrue,
    DoublyTrue,
    SinglyTrue,
    Oracle,
}

impl EstimatorId {
    pub const ALL: [EstimatorId; 7] = [
        EstimatorId::ShiftDependentMis,
        EstimatorId::DoublyMis,
        EstimatorId::SinglyMis,
        EstimatorId::ShiftDependentTrue,
        EstimatorId::DoublyTrue,
        EstimatorId::SinglyTrue,
        EstimatorId::Oracle,
    ];

    pub fn id(self) -> &'static str {
        match self {
            EstimatorId::ShiftDependentMis => "sd-mis",
            EstimatorId::DoublyMis => "df-mis",
            EstimatorId::SinglyMis => "sf-mis",
            EstimatorId::ShiftDependentTrue => "sd-true",
            EstimatorId::DoublyTrue => "df-true",
            EstimatorId::SinglyTrue => "sf-true",
            EstimatorId::Oracle => "oracle",
        }
    }

    /// Parses a comma-separated list, or `all`.
    pub fn parse_list(s: &str) -> Result<Vec<EstimatorId>> {
        if s.trim() == "all" {
            return Ok(Self::ALL.to_vec());
        }
        let mut out: Vec<EstimatorId> = s.split(',').map(str::parse).collect::<Result<_>>()?;
        out.sort();
        out.dedup();
        if out.is_empty() {
            return Err(Error::InvalidArgument("empty estimator list".into()));
        }
        Ok(out)
    }
}

impl fmt::Display for EstimatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

crate::string_serde!(EstimatorId);

impl FromStr for EstimatorId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.id() == s.trim())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown estimator {s:?}")))
    }
}

/// Which working conditional model the `df-mis` estimator uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MisspecifiedOutcome {
    /// Gaussian-linear fit on the transformed covariates in each replicate.
    #[default]
    Fitted,
    /// Large-sample limit of that fit, with fixed constants.
    Limit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    pub estimators: Vec<EstimatorId>,
    pub estimands: Vec<Estimand>,
    pub source_prob: f64,
    pub estimator: EstimatorConfig,
    pub regressor: RegressorSpec,
    pub misspecified_outcome: MisspecifiedOutcome,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            replicates: 200,
            seed: 1,
            estimators: EstimatorId::ALL.to_vec(),
            estimands: vec![Estimand::Mean, Estimand::median()],
            source_prob: 0.5,
            estimator: EstimatorConfig::default(),
            regressor: RegressorSpec::default(),
            misspecified_outcome: MisspecifiedOutcome::Fitted,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::InvalidArgument("replicates must be at least 1".into()));
        }
        if self.estimators.is_empty() || self.estimands.is_empty() {
            return Err(Error::InvalidArgument("estimator and target lists must be non-empty".into()));
        }
        if !(self.source_prob > 0.0 && self.source_prob < 1.0) {
            return Err(Error::InvalidArgument(format!("source probability {} outside (0, 1)", self.source_prob)));
        }
        Ok(())
    }

    fn spec(&self, id: EstimatorId) -> Option<EstimatorSpec> {
        let mis = || RatioSpec::Normalize(RatioBase::exp_tilt(-0.7, 1.2));
        let truth = || RatioSpec::Fixed(DensityRatioModel::unnormalized(RatioBase::exp_tilt(-0.5, 1.0)));
        Some(match id {
            EstimatorId::ShiftDependentMis => EstimatorSpec::ShiftDependent { ratio: mis() },
            EstimatorId::DoublyMis => EstimatorSpec::Doubly {
                ratio: mis(),
                outcome: match self.misspecified_outcome {
                    MisspecifiedOutcome::Fitted => OutcomeModelSpec::Fit(FeatureMap::Misspecified),
                    MisspecifiedOutcome::Limit => OutcomeModelSpec::Fixed(misspecified_limit_model()),
                },
            },
            EstimatorId::SinglyMis => EstimatorSpec::Singly { ratio: mis(), regressor: self.regressor },
            EstimatorId::ShiftDependentTrue => EstimatorSpec::ShiftDependent { ratio: truth() },
            EstimatorId::DoublyTrue => {
                EstimatorSpec::Doubly { ratio: truth(), outcome: OutcomeModelSpec::Fit(FeatureMap::Identity) }
            }
            EstimatorId::SinglyTrue => EstimatorSpec::Singly { ratio: truth(), regressor: self.regressor },
            EstimatorId::Oracle => return None,
        })
    }

    pub fn replicate_seed(&self, rep: usize) -> u64 {
        mix_seed(self.seed, rep as u64)
    }
}

/// One estimator/target result within a replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub estimator: EstimatorId,
    pub estimand: Estimand,
    pub outcome: std::result::Result<EstimateResult, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateResult {
    pub rep: usize,
    pub seed: u64,
    pub truth_mean: f64,
    pub cells: Vec<CellResult>,
}

/// Draws replicate `rep` and runs every configured estimator on it.
/// Estimator errors are recorded in the cells; only sample generation
/// errors are returned.
pub fn run_replicate(config: &SimConfig, rep: usize) -> Result<ReplicateResult> {
    config.validate()?;
    let seed = config.replicate_seed(rep);
    let synthetic = SimulationDesign { source_prob: config.source_prob }.generate(config.n, seed)?;
    let mut cells = Vec::with_capacity(config.estimators.len() * config.estimands.len());
    for &id in &config.estimators {
        for &estimand in &config.estimands {
            let outcome = run_cell(config, id, &synthetic, estimand).map_err(|e| e.to_string());
            cells.push(CellResult { estimator: id, estimand, outcome });
        }
    }
    Ok(ReplicateResult { rep, seed, truth_mean: synthetic.truth.theta_mean, cells })
}

fn run_cell(config: &SimConfig, id: EstimatorId, synthetic: &SyntheticSample, estimand: Estimand) -> Result<EstimateResult> {
    match config.spec(id) {
        Some(spec) => estimate(&spec, &synthetic.sample, estimand, &config.estimator),
        None => oracle(synthetic, estimand, &config.estimator),
    }
}

/// Aggregated performance of one estimator for one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub estimator: String,
    pub target: String,
    pub mse: f64,
    pub bias: f64,
    /// Standard deviation of the estimates (divisor R).
    pub se: f64,
    /// Average reported standard error.
    pub se_hat: f64,
    pub coverage: f64,
    pub replicates: usize,
    pub failures: usize,
}

/// Study output: summary rows and every replicate.
#[derive(Debug, Clone)]
pub struct StudyResult {
    pub rows: Vec<MetricsRow>,
    pub replicates: Vec<ReplicateResult>,
}

/// Runs all replicates (in parallel) and aggregates them in replicate order.
pub fn run_study(config: &SimConfig) -> Result<StudyResult> {
    config.validate()?;
    let truth = SimulationDesign { source_prob: config.source_prob }.generate(10, config.seed)?.truth;
    let replicates: Vec<ReplicateResult> =
        (0..config.replicates).into_par_iter().map(|rep| run_replicate(config, rep)).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for &id in &config.estimators {
        for &estimand in &config.estimands {
            let target = match estimand {
                Estimand::Mean => truth.theta_mean,
                Estimand::Quantile(t) => truth.quantile(t),
            };
            let cells: Vec<&CellResult> = replicates
                .iter()
                .flat_map(|r| r.cells.iter())
                .filter(|c| c.estimator == id && c.estimand == estimand)
                .collect();
            rows.push(aggregate(id, estimand, target, &cells)?);
        }
    }
    Ok(StudyResult { rows, replicates })
}

fn aggregate(id: EstimatorId, estimand: Estimand, truth: f64, cells: &[&CellResult]) -> Result<MetricsRow> {
    let total = cells.len();
    let ok: Vec<&EstimateResult> = cells.iter().filter_map(|c| c.outcome.as_ref().ok()).collect();
    let failures = total - ok.len();
    if failures as f64 > MAX_FAILURE_RATE * total as f64 {
        let first = cells.iter().find_map(|c| c.outcome.as_ref().err()).cloned().unwrap_or_default();
        return Err(Error::TooManyFailures { failed: failures, total, first: format!("{id} {estimand}: {first}") });
    }
    let r = ok.len() as f64;
    let mean = ok.iter().map(|e| e.theta).sum::<f64>() / r;
    let bias = mean - truth;
    let se = (ok.iter().map(|e| (e.theta - mean).powi(2)).sum::<f64>() / r).sqrt();
    let mse = ok.iter().map(|e| (e.theta - truth).powi(2)).sum::<f64>() / r;
    let ses: Vec<f64> = ok.iter().filter_map(|e| e.se).collect();
    let se_hat = if ses.is_empty() { f64::NAN } else { ses.iter().sum::<f64>() / ses.len() as f64 };
    let cis: Vec<(f64, f64)> = ok.iter().filter_map(|e| e.ci).collect();
    let coverage = if cis.is_empty() {
        f64::NAN
    } else {
        cis.iter().filter(|(lo, hi)| *lo <= truth && truth <= *hi).count() as f64 / cis.len() as f64
    };
    Ok(MetricsRow {
        estimator: id.id().to_string(),
        target: estimand.to_string(),
        mse,
        bias,
        se,
        se_hat,
        coverage,
        replicates: ok.len(),
        failures,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Markdown,
}

impl FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(TableFormat::Csv),
            "markdown" | "md" => Ok(TableFormat::Markdown),
            _ => Err(Error::InvalidArgument(format!("unknown table format {s:?}"))),
        }
    }
}

const COLUMNS: [&str; 9] = ["estimator", "target", "mse", "bias", "se", "se_hat", "coverage", "replicates", "failures"];

fn fixed(v: f64) -> String {
    format!("{v:.4}")
}

/// Renders rows with four-decimal fixed formatting.
pub fn emit_table(rows: &[MetricsRow], format: TableFormat) -> String {
    let fields = |r: &MetricsRow| {
        vec![
            r.estimator.clone(),
            r.target.clone(),
            fixed(r.mse),
            fixed(r.bias),
            fixed(r.se),
            fixed(r.se_hat),
            fixed(r.coverage),
            r.replicates.to_string(),
            r.failures.to_string(),
        ]
    };
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            out.push_str(&COLUMNS.join(","));
            out.push('\n');
            for r in rows {
                out.push_str(&fields(r).join(","));
                out.push('\n');
            }
        }
        TableFormat::Markdown => {
            out.push_str(&format!("| {} |\n", COLUMNS.join(" | ")));
            out.push_str(&format!("|{}\n", "---|".repeat(COLUMNS.len())));
            for r in rows {
                out.push_str(&format!("| {} |\n", fields(r).join(" | ")));
            }
        }
    }
    out
}

/// Inverse of the CSV form of [`emit_table`].
pub fn parse_table(csv_text: &str) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(csv_text.as_bytes());
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != COLUMNS {
        return Err(Error::Schema(format!("unexpected table header {headers:?}")));
    }
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Writes one line per replicate, estimator and target.
pub fn write_raw<W: Write>(replicates: &[ReplicateResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["rep", "seed", "estimator", "target", "theta", "se", "ci_lo", "ci_hi", "error"])?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for rep in replicates {
        for c in &rep.cells {
            let (theta, se, lo, hi, err) = match &c.outcome {
                Ok(e) => (
                    e.theta.to_string(),
                    opt(e.se),
                    opt(e.ci.map(|c| c.0)),
                    opt(e.ci.map(|c| c.1)),
                    String::new(),
                ),
                Err(msg) => (String::new(), String::new(), String::new(), String::new(), msg.clone()),
            };
            w.write_record([
                rep.rep.to_string(),
                rep.seed.to_string(),
                c.estimator.to_string(),
                c.estimand.to_string(),
                theta,
                se,
                lo,
                hi,
                err,
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::SeMethod;

    fn row(est: &str, bias: f64) -> MetricsRow {
        MetricsRow {
            estimator: est.into(),
            target: "mean".into(),
            mse: 0.0085,
            bias,
            se: 0.0922,
            se_hat: 0.0912,
            coverage: 0.955,
            replicates: 200,
            failures: 0,
        }
    }

    #[test]
    fn ids_round_trip() {
        for id in EstimatorId::ALL {
            assert_eq!(id.id().parse::<EstimatorId>().unwrap(), id);
        }
        assert_eq!(EstimatorId::parse_list("all").unwrap().len(), 7);
        assert_eq!(EstimatorId::parse_list("oracle,sd-mis,oracle").unwrap(), vec![EstimatorId::ShiftDependentMis, EstimatorId::Oracle]);
        assert!(EstimatorId::parse_list("nope").is_err());
    }

    #[test]
    fn table_shapes_and_round_trip() {
        assert_eq!(emit_table(&[], TableFormat::Csv).lines().count(), 1);
        assert_eq!(emit_table(&[row("df-mis", 0.0013)], TableFormat::Csv).lines().count(), 2);
        let rows = vec![row("df-mis", 0.0013), row("sd-mis", -0.1906)];
        let text = emit_table(&rows, TableFormat::Csv);
        assert_eq!(parse_table(&text).unwrap(), rows);
        assert!(emit_table(&rows, TableFormat::Markdown).starts_with("| estimator |"));
    }

    #[test]
    fn oracle_replicate_matches_hidden_mean() {
        let cfg = SimConfig { n: 200, replicates: 1, estimators: vec![EstimatorId::Oracle], estimands: vec![Estimand::Mean], ..Default::default() };
        let rep = run_replicate(&cfg, 3).unwrap();
        let syn = SimulationDesign::default().generate(200, cfg.replicate_seed(3)).unwrap();
        let mean = syn.hidden_target_y.iter().sum::<f64>() / syn.hidden_target_y.len() as f64;
        assert_eq!(rep.cells[0].outcome.as_ref().unwrap().theta, mean);
        assert_eq!(run_replicate(&cfg, 3).unwrap(), rep);
    }

    #[test]
    fn single_replicate_metrics() {
        let cfg = SimConfig {
            n: 200,
            replicates: 1,
            estimators: vec![EstimatorId::ShiftDependentMis, EstimatorId::Oracle],
            ..Default::default()
        };
        let study = run_study(&cfg).unwrap();
        for r in &study.rows {
            assert_eq!(r.se, 0.0);
            assert!((r.mse - r.bias * r.bias).abs() < 1e-15);
            assert!(r.coverage == 0.0 || r.coverage == 1.0);
        }
    }

    #[test]
    fn full_replicate_smoke_and_mse_identity() {
        let cfg = SimConfig { n: 500, replicates: 2, ..Default::default() };
        let study = run_study(&cfg).unwrap();
        assert_eq!(study.rows.len(), 14);
        for r in &study.rows {
            assert_eq!(r.failures, 0, "{r:?}");
            assert!((r.mse - (r.bias * r.bias + r.se * r.se)).abs() < 1e-12);
        }
        for rep in &study.replicates {
            for c in &rep.cells {
                assert!(c.outcome.as_ref().unwrap().theta.is_finite());
            }
        }
    }

    #[test]
    fn aggregation_independent_of_order() {
        let cfg = SimConfig {
            n: 150,
            replicates: 4,
            estimators: vec![EstimatorId::ShiftDependentMis],
            estimands: vec![Estimand::Mean],
            estimator: EstimatorConfig { se: SeMethod::Plugin, ..Default::default() },
            ..Default::default()
        };
        let mut reps: Vec<ReplicateResult> = (0..4).map(|r| run_replicate(&cfg, r).unwrap()).collect();
        let cells = |reps: &[ReplicateResult]| -> Vec<CellResult> { reps.iter().flat_map(|r| r.cells.clone()).collect() };
        let a_cells = cells(&reps);
        reps.reverse();
        let b_cells = cells(&reps);
        let a = aggregate(EstimatorId::ShiftDependentMis, Estimand::Mean, 1.0, &a_cells.iter().collect::<Vec<_>>()).unwrap();
        let b = aggregate(EstimatorId::ShiftDependentMis, Estimand::Mean, 1.0, &b_cells.iter().collect::<Vec<_>>()).unwrap();
        assert!((a.bias - b.bias).abs() < 1e-15 && (a.se - b.se).abs() < 1e-15 && a.coverage == b.coverage);
    }

    #[test]
    fn too_many_failures_is_an_error() {
        let ok = CellResult {
            estimator: EstimatorId::Oracle,
            estimand: Estimand::Mean,
            outcome: Ok(EstimateResult {
                theta: 1.0,
                se: None,
                ci: None,
                se_method: crate::estimators::SeKind::None,
                diagnostics: Default::default(),
            }),
        };
        let bad = CellResult { outcome: Err("boom".into()), ..ok.clone() };
        let mut cells = vec![ok.clone(); 19];
        cells.push(bad.clone());
        assert!(aggregate(EstimatorId::Oracle, Estimand::Mean, 1.0, &cells.iter().collect::<Vec<_>>()).is_ok());
        cells.push(bad);
        assert!(matches!(
            aggregate(EstimatorId::Oracle, Estimand::Mean, 1.0, &cells.iter().collect::<Vec<_>>()),
            Err(Error::TooManyFailures { .. })
        ));
    }
}
