//! `latent-dml` command line: `simulate`, `estimate`, `benchmark`.
//!
//! Exit codes: 0 success, 1 runtime or data error, 2 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::dml::{residualize, Dataset, ElasticNetGrid, DEFAULT_FOLDS};
use crate::error::Error;
use crate::harness::{self, HarnessConfig, Method, ReportFormat, RunsCsvWriter};
use crate::latent::{self, EmConfig, FitReport, ModelKind};
use crate::numerics::RngStream;
use crate::synthetic::{self, ScenarioConfig, ScenarioKind};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "latent-dml", version, about = "Latent double machine learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its ground-truth sidecar.
    Simulate(SimulateArgs),
    /// Estimate the causal effect on a CSV dataset.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo sweep and write summary and per-run reports.
    Benchmark(BenchmarkArgs),
}

/// Scenario flags shared by `simulate` and `benchmark`.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioArgs {
    /// Named benchmark scenario.
    #[arg(long)]
    pub preset: Option<String>,
    /// Scenario kind for a custom scenario: no_latent, outcome_latent, confounder, laplace_misspec.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long = "theta")]
    pub theta: Option<f64>,
    #[arg(long)]
    pub sparsity: Option<f64>,
    #[arg(long = "exp-mean")]
    pub exp_mean: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub a: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub b: Option<f64>,
    #[arg(long)]
    pub q: Option<f64>,
    #[arg(long = "sigma-u")]
    pub sigma_u: Option<f64>,
    #[arg(long = "sigma-v")]
    pub sigma_v: Option<f64>,
    #[arg(long = "laplace-scale")]
    pub laplace_scale: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset CSV path; the sidecar goes next to it as `<stem>.truth.json`.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// JSON file with default values for any of the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    Auto,
    Dml,
    Outcome,
    Confounder,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(short, long)]
    pub input: Option<PathBuf>,
    /// Outcome column (default `y`).
    #[arg(long)]
    pub outcome: Option<String>,
    /// Treatment column (default `d`).
    #[arg(long)]
    pub treatment: Option<String>,
    /// Comma-separated covariate columns, or `all` for every remaining column.
    #[arg(long)]
    pub covariates: Option<String>,
    #[arg(long, value_enum)]
    pub model: Option<ModelChoice>,
    /// Also let ordinary DML compete under `--model auto`.
    #[arg(long)]
    pub include_ordinary: bool,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON report path (default: `<input stem>.estimate.json`).
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long)]
    pub runs: Option<usize>,
    /// Comma-separated: elasticnet_direct, dml, outcome_latent, confounder_latent, bic_select.
    #[arg(long)]
    pub methods: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Concurrent runs (default: logical processors).
    #[arg(long, env = "LATENT_DML_WORKERS")]
    pub workers: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    /// Stats file (CSV; per-run rows go to `<stem>.runs.csv`) or JSON report, chosen by `--format` or else the extension.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Contents of a `--config` file. Keys mirror the long flag names with
/// underscores; command-line flags take precedence.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    #[serde(flatten)]
    scenario: ScenarioArgs,
    seed: Option<u64>,
    output: Option<PathBuf>,
    input: Option<PathBuf>,
    outcome: Option<String>,
    treatment: Option<String>,
    covariates: Option<String>,
    model: Option<ModelChoice>,
    include_ordinary: Option<bool>,
    folds: Option<usize>,
    runs: Option<usize>,
    methods: Option<String>,
    workers: Option<usize>,
    format: Option<String>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Run(Error::io(path, e))
}

fn load_config(path: Option<&PathBuf>) -> CliResult<ConfigFile> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("config file {}: {e}", path.display())))
}

fn merge_scenario(flags: &ScenarioArgs, file: &ScenarioArgs) -> ScenarioArgs {
    ScenarioArgs {
        preset: flags.preset.clone().or_else(|| file.preset.clone()),
        kind: flags.kind.clone().or_else(|| file.kind.clone()),
        n: flags.n.or(file.n),
        d: flags.d.or(file.d),
        theta: flags.theta.or(file.theta),
        sparsity: flags.sparsity.or(file.sparsity),
        exp_mean: flags.exp_mean.or(file.exp_mean),
        a: flags.a.or(file.a),
        b: flags.b.or(file.b),
        q: flags.q.or(file.q),
        sigma_u: flags.sigma_u.or(file.sigma_u),
        sigma_v: flags.sigma_v.or(file.sigma_v),
        laplace_scale: flags.laplace_scale.or(file.laplace_scale),
    }
}

/// Resolves scenario flags into a validated configuration.
pub fn scenario_from_args(args: &ScenarioArgs, seed: u64) -> Result<ScenarioConfig, String> {
    let mut cfg = match (&args.preset, &args.kind) {
        (Some(p), _) => synthetic::preset(p).map_err(|e| e.to_string())?,
        (None, Some(k)) => ScenarioConfig::new(k.parse::<ScenarioKind>().map_err(|e| e.to_string())?),
        (None, None) => return Err("either --preset or --kind is required".into()),
    };
    if let (Some(_), Some(k)) = (&args.preset, &args.kind) {
        let k: ScenarioKind = k.parse().map_err(|e: Error| e.to_string())?;
        if k != cfg.kind {
            return Err(format!("--kind {k} conflicts with preset of kind {}", cfg.kind));
        }
    }
    macro_rules! set {
        ($field:ident, $src:ident) => {
            if let Some(v) = args.$src {
                cfg.$field = v;
            }
        };
    }
    set!(n, n);
    set!(d, d);
    set!(theta_true, theta);
    set!(sparsity, sparsity);
    set!(exp_mean, exp_mean);
    set!(a, a);
    set!(b, b);
    set!(sigma_u, sigma_u);
    set!(sigma_v, sigma_v);
    set!(laplace_scale, laplace_scale);
    if args.q.is_some() {
        cfg.q = args.q;
    }
    cfg.seed = seed;
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

/// Entry point shared by the binary and the tests. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(a, out),
        Command::Estimate(a) => cmd_estimate(a, out),
        Command::Benchmark(a) => cmd_benchmark(a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            let _ = writeln!(err, "run with --help for usage");
            EXIT_USAGE
        }
        Err(CliError::Run(e)) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

/// Sidecar written next to a simulated dataset.
#[derive(Debug, Serialize, Deserialize)]
pub struct TruthSidecar {
    pub theta_true: f64,
    pub q: Option<f64>,
    pub scenario: ScenarioConfig,
    pub coef_m: Vec<f64>,
    pub coef_g: Vec<f64>,
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    let stem = csv_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    csv_path.with_file_name(format!("{stem}.truth.json"))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| {
        CliError::Run(Error::Serialize {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

fn cmd_simulate(args: SimulateArgs, out: &mut dyn Write) -> CliResult<()> {
    let file = load_config(args.config.as_ref())?;
    let scen = merge_scenario(&args.scenario, &file.scenario);
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let output = args
        .output
        .or(file.output)
        .ok_or_else(|| usage("--output is required"))?;
    let cfg = scenario_from_args(&scen, seed).map_err(usage)?;
    let inst = synthetic::generate(&cfg)?;
    inst.write_csv(&output)?;
    let side = sidecar_path(&output);
    write_json(
        &TruthSidecar {
            theta_true: inst.truth.theta_true,
            q: inst.truth.q,
            scenario: cfg.clone(),
            coef_m: inst.truth.coef_m.clone(),
            coef_g: inst.truth.coef_g.clone(),
        },
        &side,
    )?;
    let _ = writeln!(
        out,
        "wrote {} ({} rows, {} covariates) and {}",
        output.display(),
        cfg.n,
        cfg.d,
        side.display()
    );
    Ok(())
}

/// A dataset read from CSV, with the covariate names actually used.
pub struct LoadedCsv {
    pub data: Dataset,
    pub covariates: Vec<String>,
}

fn parse_cell(cell: &str, row: usize, column: &str) -> Result<f64, Error> {
    cell.trim().parse::<f64>().map_err(|_| {
        Error::InvalidData(format!(
            "row {row}, column '{column}': cannot parse '{cell}' as a number"
        ))
    })
}

/// Reads a headed CSV file. Missing columns are usage errors; malformed or
/// non-finite cells are data errors reported with their 1-based data row.
fn read_csv(
    path: &Path,
    outcome: &str,
    treatment: &str,
    covariates: Option<&str>,
) -> CliResult<LoadedCsv> {
    if outcome == treatment {
        return Err(usage("outcome and treatment columns must differ"));
    }
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::Run(Error::InvalidData(format!("{}: {e}", path.display()))))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let find = |name: &str| -> CliResult<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| usage(format!("column '{name}' not found; header has: {}", header.join(", "))))
    };
    let yi = find(outcome)?;
    let di = find(treatment)?;
    let cov_names: Vec<String> = match covariates.map(str::trim) {
        None | Some("all") | Some("") => header
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != yi && *i != di)
            .map(|(_, h)| h.clone())
            .collect(),
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
    };
    let mut xi = Vec::with_capacity(cov_names.len());
    for c in &cov_names {
        let j = find(c)?;
        if j == yi || j == di {
            return Err(usage(format!("column '{c}' cannot be both a covariate and outcome/treatment")));
        }
        xi.push(j);
    }
    if xi.is_empty() {
        return Err(usage("no covariate columns selected"));
    }

    let (mut y, mut d, mut x) = (Vec::new(), Vec::new(), Vec::new());
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| CliError::Run(Error::InvalidData(format!("row {row}: {e}"))))?;
        let get = |j: usize| -> Result<f64, Error> {
            let cell = record.get(j).unwrap_or("");
            let v = parse_cell(cell, row, &header[j])?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::InvalidData(format!("row {row}, column '{}': value is not finite", header[j])))
            }
        };
        y.push(get(yi)?);
        d.push(get(di)?);
        for &j in &xi {
            x.push(get(j)?);
        }
    }
    let n = y.len();
    let x = Array2::from_shape_vec((n, xi.len()), x).expect("row-major covariates");
    let data = Dataset::new(x, Array1::from(d), Array1::from(y))?;
    Ok(LoadedCsv {
        data,
        covariates: cov_names,
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EstimateReport {
    pub input: PathBuf,
    pub n_rows: usize,
    pub covariates: Vec<String>,
    pub model: ModelChoice,
    pub folds: usize,
    pub seed: u64,
    pub theta: f64,
    pub chosen: ModelKind,
    pub candidates: BTreeMap<ModelKind, FitReport>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub failures: BTreeMap<ModelKind, String>,
}

fn cmd_estimate(args: EstimateArgs, out: &mut dyn Write) -> CliResult<()> {
    let file = load_config(args.config.as_ref())?;
    let input = args
        .input
        .or(file.input)
        .ok_or_else(|| usage("--input is required"))?;
    let outcome = args.outcome.or(file.outcome).unwrap_or_else(|| "y".into());
    let treatment = args.treatment.or(file.treatment).unwrap_or_else(|| "d".into());
    let covariates = args.covariates.or(file.covariates);
    let model = args.model.or(file.model).unwrap_or(ModelChoice::Auto);
    let include_ordinary = args.include_ordinary || file.include_ordinary.unwrap_or(false);
    let folds = args.folds.or(file.folds).unwrap_or(DEFAULT_FOLDS);
    let seed = args.seed.or(file.seed).unwrap_or(0);
    if folds < 2 {
        return Err(usage("--folds must be at least 2"));
    }
    let output = args.output.or(file.output).unwrap_or_else(|| {
        let stem = input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "estimate".into());
        input.with_file_name(format!("{stem}.estimate.json"))
    });

    let loaded = read_csv(&input, &outcome, &treatment, covariates.as_deref())?;
    let n = loaded.data.len();
    if n < 10 * folds {
        return Err(CliError::Run(Error::InvalidData(format!(
            "need at least {} rows for {folds} folds, got {n}",
            10 * folds
        ))));
    }

    let stream = RngStream::new(seed);
    let res = residualize(&loaded.data, folds, &ElasticNetGrid::default(), &stream.substream(0))?;
    let em = EmConfig::default();
    let model_stream = stream.substream(2);
    let selection = match model {
        ModelChoice::Auto => {
            let mut cands = latent::DEFAULT_CANDIDATES.to_vec();
            if include_ordinary {
                cands.insert(0, ModelKind::Ordinary);
            }
            latent::select_and_estimate(&res, &cands, &em, &model_stream)?
        }
        single => {
            let kind = match single {
                ModelChoice::Dml => ModelKind::Ordinary,
                ModelChoice::Outcome => ModelKind::OutcomeLatent,
                _ => ModelKind::ConfounderLatent,
            };
            let fit = latent::fit_model(&res, kind, &em, &model_stream)?;
            latent::select_from(BTreeMap::from([(kind, fit)]), BTreeMap::new())?
        }
    };

    let _ = writeln!(out, "theta_hat = {}", selection.theta);
    let _ = writeln!(
        out,
        "  {:<18} {:>16} {:>16} {:>9} {:>6}",
        "model", "loglik", "bic", "converged", "iters"
    );
    for (kind, fit) in &selection.candidates {
        let mark = if *kind == selection.chosen { '*' } else { ' ' };
        let _ = writeln!(
            out,
            "{mark} {:<18} {:>16.6} {:>16.6} {:>9} {:>6}",
            kind.as_str(),
            fit.loglik,
            fit.bic,
            fit.converged,
            fit.iterations
        );
    }
    for (kind, e) in &selection.failures {
        let _ = writeln!(out, "  {:<18} failed: {e}", kind.as_str());
    }

    let report = EstimateReport {
        input: input.clone(),
        n_rows: n,
        covariates: loaded.covariates,
        model,
        folds,
        seed,
        theta: selection.theta,
        chosen: selection.chosen,
        candidates: selection.candidates,
        failures: selection.failures,
    };
    write_json(&report, &output)?;
    let _ = writeln!(out, "report: {}", output.display());
    Ok(())
}

fn cmd_benchmark(args: BenchmarkArgs, out: &mut dyn Write) -> CliResult<()> {
    let file = load_config(args.config.as_ref())?;
    let scen = merge_scenario(&args.scenario, &file.scenario);
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let runs = args.runs.or(file.runs).unwrap_or(100);
    if runs == 0 {
        return Err(usage("--runs must be at least 1"));
    }
    let methods_arg = args
        .methods
        .or(file.methods)
        .unwrap_or_else(|| "dml,outcome_latent,confounder_latent,bic_select".into());
    let methods = Method::parse_list(&methods_arg).map_err(|e| usage(e.to_string()))?;
    let folds = args.folds.or(file.folds).unwrap_or(DEFAULT_FOLDS);
    if folds < 2 {
        return Err(usage("--folds must be at least 2"));
    }
    let output = args.output.or(file.output);
    let format = match (args.format, file.format.as_deref()) {
        (Some(FormatArg::Csv), _) => ReportFormat::Csv,
        (Some(FormatArg::Json), _) => ReportFormat::Json,
        (None, Some(f)) => f.parse().map_err(|e: Error| usage(e.to_string()))?,
        // Otherwise follow the output extension.
        (None, None) => match output.as_ref().and_then(|p| p.extension()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => ReportFormat::Json,
            _ => ReportFormat::Csv,
        },
    };
    let output = output.unwrap_or_else(|| match format {
        ReportFormat::Csv => PathBuf::from("benchmark.csv"),
        ReportFormat::Json => PathBuf::from("benchmark.json"),
    });
    let cfg = scenario_from_args(&scen, seed).map_err(usage)?;
    let hc = HarnessConfig {
        folds,
        workers: args.workers.or(file.workers).unwrap_or(0),
        ..HarnessConfig::default()
    };

    let mut results = Vec::with_capacity(runs * methods.len());
    match format {
        ReportFormat::Csv => {
            let mut writer = RunsCsvWriter::create(&harness::runs_path(&output))?;
            harness::run_monte_carlo_with(&cfg, &methods, runs, seed, &hc, |batch| {
                writer.append(batch)?;
                results.extend_from_slice(batch);
                Ok(())
            })?;
            let stats = harness::aggregate(&results, cfg.theta_true);
            harness::write_stats_csv(&stats, &output)?;
            print_stats(out, &cfg, &stats, &results);
            let _ = writeln!(
                out,
                "wrote {} and {}",
                output.display(),
                harness::runs_path(&output).display()
            );
        }
        ReportFormat::Json => {
            results = harness::run_monte_carlo(&cfg, &methods, runs, seed, &hc)?;
            let stats = harness::aggregate(&results, cfg.theta_true);
            harness::write_report(&stats, &results, &output, ReportFormat::Json)?;
            print_stats(out, &cfg, &stats, &results);
            let _ = writeln!(out, "wrote {}", output.display());
        }
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

fn print_stats(
    out: &mut dyn Write,
    cfg: &ScenarioConfig,
    stats: &[harness::AggregateStats],
    results: &[harness::RunResult],
) {
    let _ = writeln!(out, "scenario {} (theta = {})", cfg.name, cfg.theta_true);
    let _ = writeln!(
        out,
        "{:<18} {:>6} {:>6} {:>9} {:>9} {:>9} {:>9} {:>9}",
        "method", "runs", "failed", "mean", "std", "bias", "rmse", "ci95"
    );
    for s in stats {
        let _ = writeln!(
            out,
            "{:<18} {:>6} {:>6} {:>9} {:>9} {:>9} {:>9} {:>9}",
            s.method.as_str(),
            s.n_runs,
            s.n_failed,
            fmt_opt(s.mean),
            fmt_opt(s.std),
            fmt_opt(s.bias),
            fmt_opt(s.rmse),
            fmt_opt(s.ci95)
        );
    }
    let mut picks: BTreeMap<ModelKind, usize> = BTreeMap::new();
    for r in results.iter().filter(|r| r.method == Method::BicSelect) {
        if let Some(k) = r.selected {
            *picks.entry(k).or_default() += 1;
        }
    }
    if !picks.is_empty() {
        let parts: Vec<String> = picks.iter().map(|(k, c)| format!("{k} {c}")).collect();
        let _ = writeln!(out, "bic_select picks: {}", parts.join(", "));
    }
}
