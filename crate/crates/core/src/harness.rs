//! Monte Carlo sweeps: generate, residualize once, apply every requested
//! estimator to the shared residuals, and summarize.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use ndarray::{concatenate, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dml::{residualize, Dataset, ElasticNetGrid, ResidualSet, DEFAULT_FOLDS};
use crate::elasticnet;
use crate::error::{Error, Result};
use crate::latent::{self, EmConfig, FitReport, ModelKind, ASCENT_SLACK};
use crate::numerics::{derive_seed, RngStream};
use crate::synthetic::{generate, ScenarioConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Treatment coefficient of one ElasticNet fit of `Y` on `(D, X)`.
    ElasticnetDirect,
    Dml,
    OutcomeLatent,
    ConfounderLatent,
    BicSelect,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::ElasticnetDirect,
        Method::Dml,
        Method::OutcomeLatent,
        Method::ConfounderLatent,
        Method::BicSelect,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::ElasticnetDirect => "elasticnet_direct",
            Method::Dml => "dml",
            Method::OutcomeLatent => "outcome_latent",
            Method::ConfounderLatent => "confounder_latent",
            Method::BicSelect => "bic_select",
        }
    }

    fn uses_residuals(self) -> bool {
        self != Method::ElasticnetDirect
    }

    /// Parses a comma-separated list, keeping first-occurrence order and
    /// dropping duplicates.
    pub fn parse_list(s: &str) -> Result<Vec<Method>> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let m: Method = part.parse()?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        if out.is_empty() {
            return Err(Error::InvalidParameter("method list is empty".into()));
        }
        Ok(out)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::NotFound {
                kind: "method",
                name: s.to_string(),
                valid: Method::ALL.iter().map(|m| m.as_str().to_string()).collect(),
            })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub run_index: usize,
    pub seed: u64,
    pub scenario: String,
    pub method: Method,
    pub theta_hat: Option<f64>,
    pub bic: Option<f64>,
    pub converged: bool,
    /// Model picked by `bic_select`.
    pub selected: Option<ModelKind>,
    /// Log-likelihood decreases beyond the ascent slack, over all fits the
    /// method relied on.
    pub ascent_violations: usize,
    pub error: Option<String>,
    /// Not written to reports, which must be reproducible byte for byte.
    #[serde(skip)]
    pub wall_time: Duration,
}

/// Equality over the reported fields; `wall_time` is ignored.
impl PartialEq for RunResult {
    fn eq(&self, other: &Self) -> bool {
        self.run_index == other.run_index
            && self.seed == other.seed
            && self.scenario == other.scenario
            && self.method == other.method
            && self.theta_hat == other.theta_hat
            && self.bic == other.bic
            && self.converged == other.converged
            && self.selected == other.selected
            && self.ascent_violations == other.ascent_violations
            && self.error == other.error
    }
}

impl RunResult {
    fn failed(run_index: usize, seed: u64, scenario: &str, method: Method, err: &Error) -> Self {
        RunResult {
            run_index,
            seed,
            scenario: scenario.to_string(),
            method,
            theta_hat: None,
            bic: None,
            converged: false,
            selected: None,
            ascent_violations: 0,
            error: Some(err.to_string()),
            wall_time: Duration::ZERO,
        }
    }

    /// Whether the run enters the aggregate statistics.
    pub fn usable(&self) -> bool {
        self.converged && self.error.is_none() && self.theta_hat.is_some_and(f64::is_finite)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    pub folds: usize,
    pub grid: ElasticNetGrid,
    pub em: EmConfig,
    /// Concurrent runs; 0 means one per logical processor.
    pub workers: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            folds: DEFAULT_FOLDS,
            grid: ElasticNetGrid::default(),
            em: EmConfig::default(),
            workers: 0,
        }
    }
}

impl HarnessConfig {
    fn worker_count(&self) -> usize {
        if self.workers > 0 {
            self.workers
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        }
    }
}

const ESTIMATION_STREAM: u64 = 1000;

/// Seed of run `index` under `master_seed`.
pub fn run_seed(master_seed: u64, index: usize) -> u64 {
    derive_seed(master_seed, index as u64)
}

/// Coefficient of `D` in an ElasticNet fit of `Y` on `[D, X]`, with the
/// hyperparameters chosen by the same grid search as the nuisance models.
pub fn elasticnet_direct(data: &Dataset, grid: &ElasticNetGrid, stream: &RngStream) -> Result<f64> {
    let dx = concatenate(Axis(1), &[data.d.view().insert_axis(Axis(1)), data.x.view()])
        .expect("rows agree");
    let cfg = if grid.alphas.len() == 1 && grid.l1_ratios.len() == 1 {
        elasticnet::ElasticNetConfig {
            alpha: grid.alphas[0],
            l1_ratio: grid.l1_ratios[0],
            ..grid.base
        }
    } else {
        let mut s = stream.clone();
        elasticnet::cv_select_targets(
            dx.view(),
            &[data.y.view()],
            grid.cv_folds,
            &grid.alphas,
            &grid.l1_ratios,
            &grid.base,
            &mut s,
        )?
        .remove(0)
    };
    let model = elasticnet::fit(dx.view(), data.y.view(), &cfg)?;
    Ok(model.coefficients[0])
}

struct FitCache<'a> {
    res: &'a ResidualSet,
    em: &'a EmConfig,
    stream: RngStream,
    fits: BTreeMap<ModelKind, std::result::Result<FitReport, String>>,
}

impl FitCache<'_> {
    fn get(&mut self, kind: ModelKind) -> std::result::Result<FitReport, String> {
        let (res, em, stream) = (self.res, self.em, &self.stream);
        self.fits
            .entry(kind)
            .or_insert_with(|| latent::fit_model(res, kind, em, stream).map_err(|e| e.to_string()))
            .clone()
    }
}

fn from_fit(base: RunResult, fit: std::result::Result<FitReport, String>) -> RunResult {
    match fit {
        Ok(f) => RunResult {
            theta_hat: Some(f.theta_final),
            bic: Some(f.bic),
            converged: f.converged && f.theta_final.is_finite(),
            ascent_violations: f.ascent_violations(ASCENT_SLACK),
            ..base
        },
        Err(e) => RunResult {
            error: Some(e),
            ..base
        },
    }
}

/// One Monte Carlo replicate: all `methods`, in the given order.
pub fn run_single(
    cfg: &ScenarioConfig,
    methods: &[Method],
    run_index: usize,
    master_seed: u64,
    hc: &HarnessConfig,
) -> Vec<RunResult> {
    let seed = run_seed(master_seed, run_index);
    let scenario = ScenarioConfig {
        seed,
        ..cfg.clone()
    };
    let name = cfg.name.as_str();
    let start = Instant::now();
    let inst = match generate(&scenario) {
        Ok(i) => i,
        Err(e) => {
            return methods
                .iter()
                .map(|&m| RunResult::failed(run_index, seed, name, m, &e))
                .collect()
        }
    };
    let stream = RngStream::new(seed).substream(ESTIMATION_STREAM);
    let residuals = if methods.iter().any(|m| m.uses_residuals()) {
        Some(residualize(&inst.data, hc.folds, &hc.grid, &stream.substream(0)))
    } else {
        None
    };
    let shared_time = start.elapsed();

    let mut cache = match &residuals {
        Some(Ok(res)) => Some(FitCache {
            res,
            em: &hc.em,
            stream: stream.substream(2),
            fits: BTreeMap::new(),
        }),
        _ => None,
    };

    methods
        .iter()
        .map(|&method| {
            let t0 = Instant::now();
            let base = RunResult {
                run_index,
                seed,
                scenario: name.to_string(),
                method,
                theta_hat: None,
                bic: None,
                converged: false,
                selected: None,
                ascent_violations: 0,
                error: None,
                wall_time: Duration::ZERO,
            };
            let mut out = if method == Method::ElasticnetDirect {
                match elasticnet_direct(&inst.data, &hc.grid, &stream.substream(1)) {
                    Ok(t) => RunResult {
                        theta_hat: Some(t),
                        converged: t.is_finite(),
                        ..base
                    },
                    Err(e) => RunResult {
                        error: Some(e.to_string()),
                        ..base
                    },
                }
            } else if let Some(cache) = cache.as_mut() {
                match method {
                    Method::Dml => from_fit(base, cache.get(ModelKind::Ordinary)),
                    Method::OutcomeLatent => from_fit(base, cache.get(ModelKind::OutcomeLatent)),
                    Method::ConfounderLatent => from_fit(base, cache.get(ModelKind::ConfounderLatent)),
                    Method::BicSelect => {
                        let mut fits = BTreeMap::new();
                        let mut failures = BTreeMap::new();
                        for kind in latent::DEFAULT_CANDIDATES {
                            match cache.get(kind) {
                                Ok(f) => {
                                    fits.insert(kind, f);
                                }
                                Err(e) => {
                                    failures.insert(kind, e);
                                }
                            }
                        }
                        let violations: usize =
                            fits.values().map(|f| f.ascent_violations(ASCENT_SLACK)).sum();
                        match latent::select_from(fits, failures) {
                            Ok(sel) => {
                                let fit = &sel.candidates[&sel.chosen];
                                RunResult {
                                    theta_hat: Some(sel.theta),
                                    bic: Some(fit.bic),
                                    converged: fit.converged && sel.theta.is_finite(),
                                    selected: Some(sel.chosen),
                                    ascent_violations: violations,
                                    ..base
                                }
                            }
                            Err(e) => RunResult {
                                error: Some(e.to_string()),
                                ascent_violations: violations,
                                ..base
                            },
                        }
                    }
                    Method::ElasticnetDirect => unreachable!(),
                }
            } else {
                let msg = match &residuals {
                    Some(Err(e)) => e.to_string(),
                    _ => "residuals unavailable".to_string(),
                };
                RunResult {
                    error: Some(msg),
                    ..base
                }
            };
            out.wall_time = t0.elapsed() + if method.uses_residuals() { shared_time } else { Duration::ZERO };
            out
        })
        .collect()
}

/// Runs `runs` replicates and returns results ordered by (run, method).
pub fn run_monte_carlo(
    cfg: &ScenarioConfig,
    methods: &[Method],
    runs: usize,
    master_seed: u64,
    hc: &HarnessConfig,
) -> Result<Vec<RunResult>> {
    let mut all = Vec::with_capacity(runs * methods.len());
    run_monte_carlo_with(cfg, methods, runs, master_seed, hc, |batch| {
        all.extend_from_slice(batch);
        Ok(())
    })?;
    Ok(all)
}

/// Like [`run_monte_carlo`], but hands each completed run's results to
/// `on_run` in run order as soon as all earlier runs are done.
pub fn run_monte_carlo_with<F>(
    cfg: &ScenarioConfig,
    methods: &[Method],
    runs: usize,
    master_seed: u64,
    hc: &HarnessConfig,
    mut on_run: F,
) -> Result<()>
where
    F: FnMut(&[RunResult]) -> Result<()>,
{
    if runs == 0 {
        return Err(Error::InvalidParameter("runs must be at least 1".into()));
    }
    if methods.is_empty() {
        return Err(Error::InvalidParameter("no methods requested".into()));
    }
    cfg.validate()?;
    let workers = hc.worker_count();
    if workers == 1 {
        for i in 0..runs {
            on_run(&run_single(cfg, methods, i, master_seed, hc))?;
        }
        return Ok(());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("worker pool: {e}")))?;
    let chunk = workers * 2;
    let mut start = 0;
    while start < runs {
        let end = (start + chunk).min(runs);
        let batch: Vec<Vec<RunResult>> = pool.install(|| {
            (start..end)
                .into_par_iter()
                .map(|i| run_single(cfg, methods, i, master_seed, hc))
                .collect()
        });
        for r in &batch {
            on_run(r)?;
        }
        start = end;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateStats {
    pub method: Method,
    /// Runs that entered the statistics.
    pub n_runs: usize,
    /// Runs excluded for non-convergence or failure.
    pub n_failed: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation (n - 1 denominator; 0 for a single run).
    pub std: Option<f64>,
    pub bias: Option<f64>,
    pub rmse: Option<f64>,
    /// `1.96 std / sqrt(n_runs)`
    pub ci95: Option<f64>,
}

/// Per-method statistics over usable runs, methods in order of first
/// appearance.
pub fn aggregate(results: &[RunResult], theta_true: f64) -> Vec<AggregateStats> {
    let mut order: Vec<Method> = Vec::new();
    for r in results {
        if !order.contains(&r.method) {
            order.push(r.method);
        }
    }
    order
        .into_iter()
        .map(|method| {
            let rows: Vec<&RunResult> = results.iter().filter(|r| r.method == method).collect();
            let vals: Vec<f64> = rows.iter().filter(|r| r.usable()).filter_map(|r| r.theta_hat).collect();
            let n = vals.len();
            let n_failed = rows.len() - n;
            if n == 0 {
                return AggregateStats {
                    method,
                    n_runs: 0,
                    n_failed,
                    mean: None,
                    std: None,
                    bias: None,
                    rmse: None,
                    ci95: None,
                };
            }
            let nf = n as f64;
            let mean = vals.iter().sum::<f64>() / nf;
            let ss: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum();
            let std = if n > 1 { (ss / (nf - 1.0)).sqrt() } else { 0.0 };
            let mse = vals.iter().map(|v| (v - theta_true).powi(2)).sum::<f64>() / nf;
            AggregateStats {
                method,
                n_runs: n,
                n_failed,
                mean: Some(mean),
                std: Some(std),
                bias: Some(mean - theta_true),
                rmse: Some(mse.sqrt()),
                ci95: Some(1.96 * std / nf.sqrt()),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(Error::NotFound {
                kind: "report format",
                name: s.to_string(),
                valid: vec!["csv".into(), "json".into()],
            }),
        }
    }
}

/// JSON report document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub stats: Vec<AggregateStats>,
    pub runs: Vec<RunResult>,
}

pub const STATS_HEADER: [&str; 7] = ["method", "n_runs", "mean", "std", "bias", "rmse", "ci95"];
pub const RUNS_HEADER: [&str; 10] = [
    "run_index",
    "seed",
    "scenario",
    "method",
    "theta_hat",
    "bic",
    "converged",
    "selected",
    "ascent_violations",
    "error",
];

/// Companion per-run file of a CSV stats report: `out.csv` -> `out.runs.csv`.
pub fn runs_path(stats_path: &Path) -> PathBuf {
    let stem = stats_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    stats_path.with_file_name(format!("{stem}.runs.csv"))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Serialize {
            path: path.to_path_buf(),
            message: format!("{other:?}"),
        },
    }
}

/// Appends run rows to a CSV file, flushing after each run so an
/// interrupted sweep leaves a valid prefix.
pub struct RunsCsvWriter {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl RunsCsvWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = csv::WriterBuilder::new()
            .quote_style(csv::QuoteStyle::Necessary)
            .from_writer(file);
        writer.write_record(RUNS_HEADER).map_err(|e| csv_err(path, e))?;
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(RunsCsvWriter {
            path: path.to_path_buf(),
            writer,
        })
    }

    pub fn append(&mut self, rows: &[RunResult]) -> Result<()> {
        for r in rows {
            let record = [
                r.run_index.to_string(),
                r.seed.to_string(),
                r.scenario.clone(),
                r.method.to_string(),
                opt(r.theta_hat),
                opt(r.bic),
                r.converged.to_string(),
                r.selected.map(|k| k.to_string()).unwrap_or_default(),
                r.ascent_violations.to_string(),
                r.error.clone().unwrap_or_default(),
            ];
            self.writer.write_record(&record).map_err(|e| csv_err(&self.path, e))?;
        }
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn write_stats_csv(stats: &[AggregateStats], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(STATS_HEADER).map_err(|e| csv_err(path, e))?;
    for s in stats {
        let record = [
            s.method.to_string(),
            s.n_runs.to_string(),
            opt(s.mean),
            opt(s.std),
            opt(s.bias),
            opt(s.rmse),
            opt(s.ci95),
        ];
        w.write_record(&record).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// CSV: stats at `path`, runs at [`runs_path`]. JSON: one [`Report`]
/// document at `path`.
pub fn write_report(
    stats: &[AggregateStats],
    results: &[RunResult],
    path: &Path,
    format: ReportFormat,
) -> Result<()> {
    match format {
        ReportFormat::Csv => {
            write_stats_csv(stats, path)?;
            RunsCsvWriter::create(&runs_path(path))?.append(results)
        }
        ReportFormat::Json => {
            let doc = Report {
                stats: stats.to_vec(),
                runs: results.to_vec(),
            };
            let file = File::create(path).map_err(|e| Error::io(path, e))?;
            let mut w = BufWriter::new(file);
            serde_json::to_writer_pretty(&mut w, &doc).map_err(|e| Error::Serialize {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
            writeln!(w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
        }
    }
}

pub fn read_json_report(path: &Path) -> Result<Report> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Serialize {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
