//! Command-line front end: `simulate`, `estimate`, `gl-nodes` and
//! `solve-fredholm`.
//!
//! Exit status is 0 on success, 1 on a computational failure and 2 on a
//! usage error. Data goes to files or standard output, diagnostics to
//! standard error. Files are written to a temporary sibling and renamed, so
//! a failed run leaves no partial output.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::estimators::{
    estimate, Estimand, EstimateResult, EstimatorConfig, EstimatorSpec, OutcomeModelSpec, RatioSpec, RegressorSpec,
    SeMethod,
};
use crate::fredholm::{landweber_solve, DiscretizedFredholm, SolverConfig};
use crate::kernels::KernelFamily;
use crate::models::{FeatureMap, RatioBase};
use crate::quadrature::QuadratureRule;
use crate::sampling::{load_csv, true_conditional_model};
use crate::simulation::{emit_table, run_study, write_raw, EstimatorId, MisspecifiedOutcome, SimConfig, TableFormat};

pub const SCHEMA_VERSION: u32 = 1;
/// Thread cap used when `--threads` is absent.
pub const THREADS_ENV: &str = "LABELSHIFT_THREADS";
const DEFAULT_BOOTSTRAP: usize = 200;

#[derive(Debug, Parser)]
#[command(name = "labelshift", version, about = "Mean and quantile estimation under label shift")]
pub struct Cli {
    /// Worker threads (default: all cores, or $LABELSHIFT_THREADS).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Progress messages on standard error.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Monte Carlo study on the synthetic design.
    Simulate(SimulateArgs),
    /// Estimate a target mean or quantile from a stacked CSV sample.
    Estimate(EstimateArgs),
    /// Print Gauss-Legendre nodes and weights.
    GlNodes(GlNodesArgs),
    /// Solve a discretized first-kind equation by Landweber iteration.
    SolveFredholm(SolveArgs),
}

/// Options shared by `simulate` and `estimate`.
#[derive(Debug, Clone, Default, Args)]
pub struct TuningArgs {
    /// Kernel family for both smoothers.
    #[arg(long)]
    pub kernel: Option<KernelFamily>,
    /// Outcome-kernel bandwidth (default n1^(-1/3)).
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// Covariate-kernel bandwidth (default scale * n1^(-1/(4+d))).
    #[arg(long)]
    pub x_bandwidth: Option<f64>,
    /// Covariate-kernel bandwidth scale.
    #[arg(long)]
    pub bandwidth_scale: Option<f64>,
    /// Quadrature nodes.
    #[arg(long)]
    pub nodes: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub level: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// JSON configuration; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated estimator ids, or `all`.
    #[arg(long)]
    pub estimators: Option<String>,
    /// Comma-separated targets, e.g. `mean,quantile:0.5`.
    #[arg(long)]
    pub targets: Option<String>,
    #[arg(long)]
    pub source_prob: Option<f64>,
    #[arg(long, value_parser = ["fitted", "limit"])]
    pub misspecified_outcome: Option<String>,
    /// `csv` or `markdown`; inferred from a `.md` output name otherwise.
    #[arg(long)]
    pub format: Option<String>,
    /// Summary table (standard output if absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-replicate estimates.
    #[arg(long)]
    pub raw: Option<PathBuf>,
    #[command(flatten)]
    pub tuning: TuningArgs,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// JSON configuration; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CSV with columns r, y, x1..xd.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// `shift-dependent`, `doubly` or `singly`.
    #[arg(long)]
    pub estimator: Option<String>,
    /// `mean`, `median` or `quantile:<t>`.
    #[arg(long)]
    pub target: Option<String>,
    /// Ratio working model `exp(a+b*y)`, rescaled on the sample.
    #[arg(long)]
    pub rho: Option<String>,
    /// Conditional outcome model: `fit-gaussian`, `misspecified` or `true-design`.
    #[arg(long)]
    pub cond: Option<String>,
    /// `none`, `plugin`, `bootstrap:<B>` or `bootstrap:<B>:<seed>`.
    #[arg(long)]
    pub se: Option<String>,
    /// Seed for bootstrap resampling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Result JSON (standard output if absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub tuning: TuningArgs,
}

#[derive(Debug, Args)]
pub struct GlNodesArgs {
    #[arg(long)]
    pub m: usize,
    #[arg(long, allow_hyphen_values = true)]
    pub a: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub b: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// Kernel matrix, one row per line, no header.
    #[arg(long)]
    pub phi: PathBuf,
    /// Right-hand side, one value per line.
    #[arg(long)]
    pub target: PathBuf,
    /// Quadrature weights, one value per line (default: all ones).
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Keep the step even if it exceeds the stability bound.
    #[arg(long)]
    pub no_guard: bool,
    /// Solution as CSV `index,a_hat` (standard output if absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Solver diagnostics as JSON (standard error if absent).
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
}

/// File form of the `estimate` configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateFile {
    pub input: Option<PathBuf>,
    pub estimator: Option<String>,
    pub target: Option<Estimand>,
    pub rho: Option<String>,
    pub cond: Option<String>,
    pub se: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub config: EstimatorConfig,
    pub regressor: RegressorSpec,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failure(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Failure(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Failure(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failure(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Failure(e) => write!(f, "error: {e}"),
        }
    }
}

fn usage(e: impl ToString) -> CliError {
    CliError::Usage(e.to_string())
}

/// Parses `argv`, runs the command and returns the exit status.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let threads = match cli.threads {
        Some(t) => Some(t),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.trim().parse().map_err(|_| usage(format!("{THREADS_ENV}={v:?} is not a count")))?),
            Err(_) => None,
        },
    };
    if threads == Some(0) {
        return Err(usage("thread count must be positive"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| usage(format!("cannot start thread pool: {e}")))?;
    let verbose = cli.verbose;
    pool.install(|| match cli.command {
        Command::Simulate(a) => simulate(a, verbose),
        Command::Estimate(a) => estimate_cmd(a, verbose),
        Command::GlNodes(a) => gl_nodes(a),
        Command::SolveFredholm(a) => solve_fredholm(a),
    })
}

/// Parses `exp(a+b*y)` (terms in any order, either may be absent).
pub fn parse_rho(s: &str) -> Result<RatioBase, Error> {
    let bad = || Error::InvalidArgument(format!("cannot parse ratio model {s:?}; expected exp(a+b*y)"));
    let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    let body = compact.strip_prefix("exp(").and_then(|r| r.strip_suffix(')')).ok_or_else(bad)?;
    if body.is_empty() {
        return Err(bad());
    }
    // split into signed terms, leaving exponent signs alone
    let mut terms = Vec::new();
    let mut start = 0;
    let bytes = body.as_bytes();
    for i in 1..bytes.len() {
        if (bytes[i] == b'+' || bytes[i] == b'-') && !matches!(bytes[i - 1], b'e' | b'E' | b'*' | b'+' | b'-') {
            terms.push(&body[start..i]);
            start = i;
        }
    }
    terms.push(&body[start..]);
    let (mut a, mut b) = (0.0, 0.0);
    for term in terms {
        let (sign, t) = match term.as_bytes()[0] {
            b'-' => (-1.0, &term[1..]),
            b'+' => (1.0, &term[1..]),
            _ => (1.0, term),
        };
        let coef = if t == "y" {
            Some(1.0)
        } else if let Some(c) = t.strip_suffix("*y") {
            Some(c.parse::<f64>().map_err(|_| bad())?)
        } else if let Some(c) = t.strip_prefix("y*") {
            Some(c.parse::<f64>().map_err(|_| bad())?)
        } else {
            None
        };
        match coef {
            Some(c) => b += sign * c,
            None => a += sign * t.parse::<f64>().map_err(|_| bad())?,
        }
    }
    if !(a.is_finite() && b.is_finite()) {
        return Err(bad());
    }
    Ok(RatioBase::exp_tilt(a, b))
}

fn parse_list<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<Vec<T>, Error> {
    s.split(',').filter(|t| !t.trim().is_empty()).map(str::parse).collect()
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("invalid configuration {}: {e}", path.display())))
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn emit(path: Option<&Path>, bytes: &[u8]) -> io::Result<()> {
    match path {
        Some(p) => write_atomic(p, bytes),
        None => io::stdout().lock().write_all(bytes),
    }
}

fn apply_tuning(t: &TuningArgs, cfg: &mut EstimatorConfig, reg: &mut RegressorSpec) {
    if let Some(k) = t.kernel {
        cfg.outcome_kernel = k;
        reg.family = k;
    }
    if let Some(h) = t.bandwidth {
        cfg.outcome_bandwidth = Some(h);
    }
    if let Some(h) = t.x_bandwidth {
        reg.bandwidth = Some(h);
    }
    if let Some(s) = t.bandwidth_scale {
        reg.scale = s;
    }
    if let Some(m) = t.nodes {
        cfg.rule.nodes = m;
    }
    if let Some(tol) = t.tol {
        cfg.solver.tol = tol;
    }
    if let Some(m) = t.max_iter {
        cfg.solver.max_iter = m;
    }
    if let Some(l) = t.level {
        cfg.level = l;
    }
}

/// Merged `simulate` configuration: file values, then flags.
pub fn simulate_config(a: &SimulateArgs) -> Result<SimConfig, CliError> {
    let mut cfg: SimConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SimConfig::default(),
    };
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if let Some(r) = a.replicates {
        cfg.replicates = r;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = &a.estimators {
        cfg.estimators = EstimatorId::parse_list(e).map_err(usage)?;
    }
    if let Some(t) = &a.targets {
        cfg.estimands = parse_list(t).map_err(usage)?;
    }
    if let Some(p) = a.source_prob {
        cfg.source_prob = p;
    }
    if let Some(m) = &a.misspecified_outcome {
        cfg.misspecified_outcome =
            if m == "limit" { MisspecifiedOutcome::Limit } else { MisspecifiedOutcome::Fitted };
    }
    apply_tuning(&a.tuning, &mut cfg.estimator, &mut cfg.regressor);
    cfg.validate().map_err(usage)?;
    cfg.estimator.validate().map_err(usage)?;
    Ok(cfg)
}

fn table_format(a: &SimulateArgs) -> Result<TableFormat, CliError> {
    match &a.format {
        Some(f) => f.parse().map_err(usage),
        None => Ok(match a.out.as_deref().and_then(Path::extension) {
            Some(ext) if ext == "md" => TableFormat::Markdown,
            _ => TableFormat::Csv,
        }),
    }
}

fn simulate(a: SimulateArgs, verbose: bool) -> Result<(), CliError> {
    let cfg = simulate_config(&a)?;
    let format = table_format(&a)?;
    if verbose {
        eprintln!(
            "simulate: n={} replicates={} seed={} threads={}",
            cfg.n,
            cfg.replicates,
            cfg.seed,
            rayon::current_num_threads()
        );
    }
    let study = run_study(&cfg)?;
    if let Some(raw) = &a.raw {
        let mut buf = Vec::new();
        write_raw(&study.replicates, &mut buf)?;
        write_atomic(raw, &buf)?;
    }
    emit(a.out.as_deref(), emit_table(&study.rows, format).as_bytes())?;
    Ok(())
}

/// Everything `estimate` needs after merging file and flags.
#[derive(Debug, Clone)]
pub struct EstimatePlan {
    pub input: PathBuf,
    pub spec: EstimatorSpec,
    pub estimator: String,
    pub estimand: Estimand,
    pub config: EstimatorConfig,
    pub out: Option<PathBuf>,
}

pub fn estimate_plan(a: &EstimateArgs) -> Result<EstimatePlan, CliError> {
    let mut file: EstimateFile = match &a.config {
        Some(p) => read_json(p)?,
        None => EstimateFile::default(),
    };
    let input = a.input.clone().or(file.input.take()).ok_or_else(|| usage("--input is required"))?;
    let estimator = a.estimator.clone().or(file.estimator.take()).unwrap_or_else(|| "doubly".into());
    let estimand = match &a.target {
        Some(t) => t.parse().map_err(usage)?,
        None => file.target.unwrap_or(Estimand::Mean),
    };
    let rho = a.rho.clone().or(file.rho.take()).unwrap_or_else(|| "exp(-0.7+1.2*y)".into());
    let ratio = RatioSpec::Normalize(parse_rho(&rho).map_err(usage)?);
    let mut config = file.config;
    let mut regressor = file.regressor;
    apply_tuning(&a.tuning, &mut config, &mut regressor);
    let seed = a.seed.or(file.seed).unwrap_or(1);
    config.se = match a.se.clone().or(file.se.take()) {
        Some(s) => {
            let method: SeMethod = s.parse().map_err(usage)?;
            match method {
                // seedless form takes --seed
                SeMethod::Bootstrap { replicates, .. } if s.trim().matches(':').count() == 1 => {
                    SeMethod::Bootstrap { replicates, seed }
                }
                m => m,
            }
        }
        None => match estimand {
            Estimand::Mean => SeMethod::Plugin,
            Estimand::Quantile(_) => SeMethod::Bootstrap { replicates: DEFAULT_BOOTSTRAP, seed },
        },
    };
    config.validate().map_err(usage)?;
    let cond = a.cond.clone().or(file.cond.take());
    let spec = match estimator.as_str() {
        "shift-dependent" => EstimatorSpec::ShiftDependent { ratio },
        "doubly" => {
            let outcome = match cond.as_deref().unwrap_or("fit-gaussian") {
                "fit-gaussian" => OutcomeModelSpec::Fit(FeatureMap::Identity),
                "misspecified" | "paper-misspecified" => OutcomeModelSpec::Fit(FeatureMap::Misspecified),
                "true-design" | "true-paper" => OutcomeModelSpec::Fixed(true_conditional_model()),
                other => return Err(usage(format!("unknown conditional model {other:?}"))),
            };
            EstimatorSpec::Doubly { ratio, outcome }
        }
        "singly" => {
            if cond.is_some() {
                return Err(usage("--cond applies to the doubly estimator only"));
            }
            EstimatorSpec::Singly { ratio, regressor }
        }
        other => return Err(usage(format!("unknown estimator {other:?}"))),
    };
    Ok(EstimatePlan { input, spec, estimator, estimand, config, out: a.out.clone().or(file.out) })
}

#[derive(Debug, Serialize)]
struct EstimateOutput<'a> {
    schema_version: u32,
    estimator: &'a str,
    target: String,
    n: usize,
    n1: usize,
    #[serde(flatten)]
    result: &'a EstimateResult,
}

fn estimate_cmd(a: EstimateArgs, verbose: bool) -> Result<(), CliError> {
    let plan = estimate_plan(&a)?;
    let file = File::open(&plan.input).map_err(|e| usage(format!("cannot open {}: {e}", plan.input.display())))?;
    let sample = load_csv(io::BufReader::new(file))?;
    if verbose {
        eprintln!("estimate: {} units, {} labelled, d={}", sample.n(), sample.n1(), sample.dim());
    }
    let result = estimate(&plan.spec, &sample, plan.estimand, &plan.config)?;
    if result.diagnostics.ci_excludes_theta {
        eprintln!("warning: bootstrap interval excludes the point estimate");
    }
    let out = EstimateOutput {
        schema_version: SCHEMA_VERSION,
        estimator: &plan.estimator,
        target: plan.estimand.to_string(),
        n: sample.n(),
        n1: sample.n1(),
        result: &result,
    };
    let mut json = serde_json::to_vec_pretty(&out).map_err(|e| CliError::Failure(Error::NonFinite(e.to_string())))?;
    json.push(b'\n');
    emit(plan.out.as_deref(), &json)?;
    Ok(())
}

fn gl_nodes(a: GlNodesArgs) -> Result<(), CliError> {
    let rule = QuadratureRule::gauss_legendre(a.m, a.a, a.b).map_err(usage)?;
    let mut out = String::from("node,weight\n");
    for (x, w) in rule.nodes().iter().zip(rule.weights()) {
        out.push_str(&format!("{x},{w}\n"));
    }
    emit(a.out.as_deref(), out.as_bytes())?;
    Ok(())
}

fn read_matrix(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(Error::from)?;
        let row = rec
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Error::Malformed { row: i + 1, msg: format!("{}: {e}", path.display()) })?;
        rows.push(row);
    }
    Ok(rows)
}

fn read_vector(path: &Path) -> Result<Vec<f64>, CliError> {
    let rows = read_matrix(path)?;
    Ok(rows.into_iter().flatten().collect())
}

fn solve_fredholm(a: SolveArgs) -> Result<(), CliError> {
    let rows = read_matrix(&a.phi)?;
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(CliError::Failure(Error::Schema("kernel matrix rows differ in length".into())));
    }
    let phi = DMatrix::from_fn(rows.len(), m, |i, j| rows[i][j]);
    let target = read_vector(&a.target)?;
    let weights = match &a.weights {
        Some(p) => read_vector(p)?,
        None => vec![1.0; m],
    };
    let mut config = SolverConfig { step: a.step, spectral_guard: !a.no_guard, ..Default::default() };
    if let Some(t) = a.tol {
        config.tol = t;
    }
    if let Some(n) = a.max_iter {
        config.max_iter = n;
    }
    let problem = DiscretizedFredholm::new(phi, target, weights)?.with_config(config);
    let (sol, diag) = landweber_solve(&problem, &vec![0.0; m])?;
    let mut csv_out = String::from("index,a_hat\n");
    for (j, v) in sol.iter().enumerate() {
        csv_out.push_str(&format!("{j},{v}\n"));
    }
    let mut json = serde_json::to_vec_pretty(&diag).map_err(|e| CliError::Failure(Error::NonFinite(e.to_string())))?;
    json.push(b'\n');
    match &a.diagnostics {
        Some(p) => write_atomic(p, &json)?,
        None => io::stderr().lock().write_all(&json)?,
    }
    emit(a.out.as_deref(), csv_out.as_bytes())?;
    if !diag.converged {
        eprintln!("warning: Landweber solver stopped at the iteration cap without meeting the tolerance");
    }
    Ok(())
}
