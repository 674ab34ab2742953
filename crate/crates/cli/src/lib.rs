//! The `recal` command line: single runs, sweeps and property checks.
//!
//! Settings come from flags, an optional JSON config file (`--config`) and
//! built-in defaults, in that order of precedence.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use recal_core::harness::{
    parse_exponent, run_experiment, sweep, theoretical_slopes, validate_exponent, Checkpoint, ExperimentConfig,
    ForecasterKind, LabelSpec, OracleSpec, Resolution, RunMetrics, SweepSummary, Trace,
};
use recal_core::parallel::Execution;
use recal_core::verify::{run_all, Budget};
use recal_core::ScoringRule;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

pub const THREADS_ENV: &str = "RECAL_THREADS";

/// A problem with the requested configuration, detected before any work.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Lifts a core error into the CLI's error space, keeping configuration
/// errors recognizable.
fn core(e: recal_core::Error) -> anyhow::Error {
    if let recal_core::Error::Config(msg) = e {
        config_err(msg)
    } else {
        e.into()
    }
}

/// Exit code for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.is::<ConfigError>()) {
        EXIT_CONFIG
    } else {
        EXIT_FAILURE
    }
}

#[derive(Debug, Parser)]
#[command(name = "recal", version, about = "Online recalibration of black-box probability forecasts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment and write its trace.
    Run(ExperimentArgs),
    /// Run an experiment over a grid of horizons and seeds.
    Sweep(SweepArgs),
    /// Run the property checks.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct ExperimentArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// approach, mw or passthrough.
    #[arg(long)]
    pub forecaster: Option<String>,
    /// brier or log:<gamma>.
    #[arg(long)]
    pub rule: Option<String>,
    /// Grid resolution.
    #[arg(long, conflicts_with = "exponent")]
    pub m: Option<usize>,
    /// Tradeoff exponent in [1/3, 2/5]; sets m = ceil(T^(1-2x)).
    #[arg(long)]
    pub exponent: Option<String>,
    /// Horizon.
    #[arg(long = "T")]
    pub horizon: Option<u64>,
    /// truth, clairvoyant:<beta>, constant:<c> or noisy:<sigma>.
    #[arg(long)]
    pub oracle: Option<String>,
    /// bernoulli:<p>, periodic:<bits> or adversarial.
    #[arg(long)]
    pub labels: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// csv or json.
    #[arg(long)]
    pub format: Option<String>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    /// Comma-separated horizons.
    #[arg(long = "T-grid")]
    pub t_grid: Option<String>,
    /// Seeds per horizon.
    #[arg(long)]
    pub seeds: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct VerifyArgs {
    /// Ten times fewer samples.
    #[arg(long)]
    pub quick: bool,
}

/// The config file schema. Keys mirror the flag names.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forecaster: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exponent: Option<f64>,
    #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<String>,
    #[serde(rename = "T-grid", default, skip_serializing_if = "Option::is_none")]
    pub t_grid: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| config_err(format!("invalid config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(config_err(format!("unknown format '{other}' (expected csv or json)"))),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Csv => "csv",
            Format::Json => "json",
        })
    }
}

pub const DEFAULT_M: usize = 8;
pub const DEFAULT_HORIZON: u64 = 4096;
pub const DEFAULT_SEEDS: usize = 20;

/// Fully resolved settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub experiment: ExperimentConfig,
    pub out: PathBuf,
    pub format: Format,
    pub t_grid: Option<Vec<u64>>,
    pub seeds: usize,
}

impl Settings {
    /// The settings as a config file; loading it back reproduces them.
    pub fn to_file_config(&self) -> FileConfig {
        let e = &self.experiment;
        let (m, exponent) = match e.resolution {
            Resolution::Grid(m) => (Some(m), None),
            Resolution::Exponent(x) => (None, Some(x)),
        };
        FileConfig {
            forecaster: Some(e.forecaster.to_string()),
            rule: Some(e.rule.to_string()),
            m,
            exponent,
            horizon: Some(e.horizon),
            oracle: Some(e.oracle.to_string()),
            labels: Some(e.labels.to_string()),
            seed: Some(e.seed),
            out: Some(self.out.clone()),
            format: Some(self.format.to_string()),
            t_grid: self.t_grid.clone(),
            seeds: Some(self.seeds),
        }
    }
}

fn parse_with<T, E: fmt::Display>(s: &str, what: &str, f: impl FnOnce(&str) -> std::result::Result<T, E>) -> Result<T> {
    f(s).map_err(|e| config_err(format!("invalid {what} '{s}': {e}")))
}

/// Merges flags over the config file over defaults.
pub fn resolve(args: &ExperimentArgs, t_grid: Option<&str>, seeds: Option<usize>) -> Result<Settings> {
    let file = match &args.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let pick = |flag: &Option<String>, from_file: &Option<String>, default: &str| {
        flag.clone().or_else(|| from_file.clone()).unwrap_or_else(|| default.to_string())
    };

    let forecaster: ForecasterKind = parse_with(&pick(&args.forecaster, &file.forecaster, "approach"), "forecaster", str::parse)?;
    let rule: ScoringRule = parse_with(&pick(&args.rule, &file.rule, "brier"), "rule", str::parse)?;
    let oracle: OracleSpec = parse_with(&pick(&args.oracle, &file.oracle, "clairvoyant:0.2"), "oracle", str::parse)?;
    let labels: LabelSpec = parse_with(&pick(&args.labels, &file.labels, "bernoulli:0.5"), "labels", str::parse)?;
    let format: Format = pick(&args.format, &file.format, "csv").parse()?;

    let resolution = match (args.m, &args.exponent) {
        (Some(m), _) => Resolution::Grid(m),
        (None, Some(x)) => Resolution::Exponent(parse_exponent(x).map_err(core)?),
        (None, None) => match (file.m, file.exponent) {
            (Some(_), Some(_)) => return Err(config_err("config sets both m and exponent")),
            (Some(m), None) => Resolution::Grid(m),
            (None, Some(x)) => Resolution::Exponent(validate_exponent(x).map_err(core)?),
            (None, None) => Resolution::Grid(DEFAULT_M),
        },
    };

    let t_grid = match t_grid {
        Some(s) => Some(parse_grid(s)?),
        None => file.t_grid.clone(),
    };
    if let Some(grid) = &t_grid {
        check_grid(grid)?;
    }
    let seeds = seeds.or(file.seeds).unwrap_or(DEFAULT_SEEDS);
    if seeds == 0 {
        return Err(config_err("seeds must be positive"));
    }

    Ok(Settings {
        experiment: ExperimentConfig {
            forecaster,
            rule,
            resolution,
            horizon: args.horizon.or(file.horizon).unwrap_or(DEFAULT_HORIZON),
            oracle,
            labels,
            seed: args.seed.or(file.seed).unwrap_or(0),
        },
        out: args.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from(".")),
        format,
        t_grid,
        seeds,
    })
}

fn parse_grid(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| parse_with(p, "horizon", str::parse::<u64>))
        .collect()
}

fn check_grid(grid: &[u64]) -> Result<()> {
    if grid.is_empty() {
        return Err(config_err("T grid must be nonempty"));
    }
    if grid.contains(&0) {
        return Err(config_err("T grid entries must be positive"));
    }
    Ok(())
}

/// Parallelism for sweeps: all cores unless `RECAL_THREADS` caps it.
pub fn execution_from_env() -> Result<Execution> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(Execution::parallel()),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(0) | Err(_) => Err(config_err(format!("{THREADS_ENV} must be a positive integer, got '{v}'"))),
            Ok(1) => Ok(Execution::Sequential),
            Ok(n) => Ok(Execution::Parallel { threads: Some(n) }),
        },
    }
}

/// Writes `bytes` to `path` via a temporary file in the same directory and
/// a rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating a file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new())
}

fn num(x: f64) -> String {
    format!("{x}")
}

pub const TRACE_COLUMNS: [&str; 8] = ["t", "q", "p", "y", "calib_l1", "avg_regret", "recal_rate", "dist_to_target"];

/// The trace as CSV; metric cells are filled only on checkpoint rows.
pub fn trace_csv(trace: &Trace) -> Result<Vec<u8>> {
    let mut w = csv_writer();
    w.write_record(TRACE_COLUMNS)?;
    let mut checkpoints = trace.checkpoints.iter().peekable();
    for row in &trace.rows {
        let mut record = vec![row.t.to_string(), num(row.q), num(row.p), row.y.to_string()];
        match checkpoints.peek() {
            Some(c) if c.t == row.t => {
                record.extend([num(c.calib_l1), num(c.avg_regret), num(c.recal_rate), num(c.dist_to_target)]);
                checkpoints.next();
            }
            _ => record.extend(std::iter::repeat_n(String::new(), 4)),
        }
        w.write_record(&record)?;
    }
    w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))
}

#[derive(Serialize)]
struct TraceJsonRow<'a> {
    t: u64,
    q: f64,
    p: f64,
    y: u8,
    #[serde(flatten)]
    checkpoint: Option<MetricCells<'a>>,
}

#[derive(Serialize)]
struct MetricCells<'a> {
    calib_l1: &'a f64,
    avg_regret: &'a f64,
    recal_rate: &'a f64,
    dist_to_target: &'a f64,
}

fn trace_json(trace: &Trace) -> Result<Vec<u8>> {
    let mut checkpoints = trace.checkpoints.iter().peekable();
    let rows: Vec<TraceJsonRow> = trace
        .rows
        .iter()
        .map(|r| {
            let checkpoint = match checkpoints.peek() {
                Some(c) if c.t == r.t => checkpoints.next().map(|c| MetricCells {
                    calib_l1: &c.calib_l1,
                    avg_regret: &c.avg_regret,
                    recal_rate: &c.recal_rate,
                    dist_to_target: &c.dist_to_target,
                }),
                _ => None,
            };
            TraceJsonRow { t: r.t, q: r.q, p: r.p, y: r.y, checkpoint }
        })
        .collect();
    Ok(serde_json::to_vec_pretty(&rows)?)
}

#[derive(Serialize)]
struct RunSummary<'a> {
    config: FileConfig,
    m: usize,
    metrics: &'a RunMetrics,
    checkpoints: &'a [Checkpoint],
    wall_time_secs: f64,
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

pub fn cmd_run(args: &ExperimentArgs) -> Result<()> {
    let settings = resolve(args, None, None)?;
    settings.experiment.validate().map_err(core)?;
    prepare_out(&settings.out)?;
    let start = Instant::now();
    let trace = run_experiment(&settings.experiment).map_err(core)?;
    let wall = start.elapsed().as_secs_f64();

    let (name, body) = match settings.format {
        Format::Csv => ("trace.csv", trace_csv(&trace)?),
        Format::Json => ("trace.json", trace_json(&trace)?),
    };
    write_atomic(&settings.out.join(name), &body)?;
    let summary = RunSummary {
        config: settings.to_file_config(),
        m: trace.m,
        metrics: &trace.metrics,
        checkpoints: &trace.checkpoints,
        wall_time_secs: wall,
    };
    write_atomic(&settings.out.join("summary.json"), &serde_json::to_vec_pretty(&summary)?)?;

    let m = &trace.metrics;
    println!(
        "T={} m={} calibration_rate={:.6} average_regret={:.6} recal_rate={:.6} dist_to_target={:.6} (bound {:.6})",
        m.t, m.m, m.calibration_rate, m.average_regret, m.recalibration_rate, m.dist_to_target, m.approachability_bound
    );
    Ok(())
}

pub const SWEEP_COLUMNS: [&str; 8] = [
    "T",
    "m",
    "mean_calib",
    "mean_regret",
    "mean_recal_rate",
    "stderr_calib",
    "stderr_regret",
    "stderr_recal_rate",
];

pub fn sweep_csv(summary: &SweepSummary) -> Result<Vec<u8>> {
    let mut w = csv_writer();
    w.write_record(SWEEP_COLUMNS)?;
    for r in &summary.rows {
        w.write_record([
            r.t.to_string(),
            r.m.to_string(),
            num(r.mean_calib),
            num(r.mean_regret),
            num(r.mean_recal_rate),
            num(r.stderr_calib),
            num(r.stderr_regret),
            num(r.stderr_recal_rate),
        ])?;
    }
    w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))
}

#[derive(Serialize)]
struct SweepReport<'a> {
    config: FileConfig,
    seeds: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    rows: Option<&'a [recal_core::harness::SweepRow]>,
    calib_fit: Option<recal_core::harness::LogLogFit>,
    regret_fit: Option<recal_core::harness::LogLogFit>,
    recal_fit: Option<recal_core::harness::LogLogFit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    theoretical_calib_slope: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    theoretical_regret_slope: Option<f64>,
    wall_time_secs: f64,
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let settings = resolve(&args.experiment, args.t_grid.as_deref(), args.seeds)?;
    let grid = settings
        .t_grid
        .clone()
        .ok_or_else(|| config_err("sweep needs --T-grid (or \"T-grid\" in the config file)"))?;
    let exec = execution_from_env()?;
    prepare_out(&settings.out)?;
    let start = Instant::now();
    let summary = sweep(&settings.experiment, &grid, settings.seeds, exec).map_err(core)?;
    let wall = start.elapsed().as_secs_f64();

    let theory = match settings.experiment.resolution {
        Resolution::Exponent(x) => Some(theoretical_slopes(x)),
        Resolution::Grid(_) => None,
    };
    let report = SweepReport {
        config: settings.to_file_config(),
        seeds: settings.seeds,
        rows: (settings.format == Format::Json).then_some(summary.rows.as_slice()),
        calib_fit: summary.calib_fit,
        regret_fit: summary.regret_fit,
        recal_fit: summary.recal_fit,
        theoretical_calib_slope: theory.map(|t| t.0),
        theoretical_regret_slope: theory.map(|t| t.1),
        wall_time_secs: wall,
    };
    if settings.format == Format::Csv {
        write_atomic(&settings.out.join("sweep.csv"), &sweep_csv(&summary)?)?;
    }
    write_atomic(&settings.out.join("sweep.json"), &serde_json::to_vec_pretty(&report)?)?;

    for r in &summary.rows {
        println!(
            "T={} m={} calib={:.6}±{:.6} regret={:.6}±{:.6} recal={:.6}±{:.6}",
            r.t, r.m, r.mean_calib, r.stderr_calib, r.mean_regret, r.stderr_regret, r.mean_recal_rate, r.stderr_recal_rate
        );
    }
    for (name, fit) in [("calibration", summary.calib_fit), ("regret", summary.regret_fit), ("recalibration", summary.recal_fit)] {
        match fit {
            Some(f) => println!("{name} slope {:.4} (r² {:.4})", f.slope, f.r_squared),
            None => println!("{name} slope unavailable (fewer than three positive means)"),
        }
    }
    Ok(())
}

/// Runs the property suite; `Ok(false)` when some property fails.
pub fn cmd_verify(args: &VerifyArgs) -> Result<bool> {
    let budget = if args.quick { Budget::quick() } else { Budget::full() };
    let exec = execution_from_env()?;
    let reports = run_all(budget, exec);
    for r in &reports {
        println!(
            "{} {:<34} samples={:<7} violations={:<5} worst_slack={:.3e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.samples,
            r.violations,
            r.worst_slack
        );
    }
    Ok(reports.iter().all(|r| r.passed))
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let outcome = match &cli.command {
        Command::Run(a) => cmd_run(a).map(|_| true),
        Command::Sweep(a) => cmd_sweep(a).map(|_| true),
        Command::Verify(a) => cmd_verify(a),
    };
    match outcome {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_FAILURE,
        Err(e) => {
            let code = exit_code(&e);
            let kind = if code == EXIT_CONFIG { "configuration error" } else { "error" };
            eprintln!("{kind}: {e:#}");
            code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let s = resolve(&ExperimentArgs::default(), None, None).unwrap();
        assert_eq!(s.experiment.forecaster, ForecasterKind::Approach);
        assert_eq!(s.experiment.resolution, Resolution::Grid(DEFAULT_M));
        assert_eq!(s.experiment.horizon, DEFAULT_HORIZON);
        assert_eq!(s.format, Format::Csv);
        assert_eq!(s.seeds, DEFAULT_SEEDS);
        assert!(s.t_grid.is_none());
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("1024, 4096,16384").unwrap(), vec![1024, 4096, 16384]);
        assert!(parse_grid("").unwrap().is_empty());
        assert!(parse_grid("12,x").is_err());
        let err = resolve(&ExperimentArgs::default(), Some(""), None).unwrap_err();
        assert_eq!(exit_code(&err), EXIT_CONFIG);
    }

    #[test]
    fn bad_values_are_config_errors() {
        for args in [
            ExperimentArgs { rule: Some("hinge".into()), ..Default::default() },
            ExperimentArgs { rule: Some("log:0.7".into()), ..Default::default() },
            ExperimentArgs { exponent: Some("0.5".into()), ..Default::default() },
            ExperimentArgs { format: Some("xml".into()), ..Default::default() },
            ExperimentArgs { labels: Some("bernoulli:2".into()), ..Default::default() },
        ] {
            let err = resolve(&args, None, None).unwrap_err();
            assert_eq!(exit_code(&err), EXIT_CONFIG, "{args:?}");
        }
    }

    #[test]
    fn runtime_errors_are_not_config_errors() {
        let err: anyhow::Error = recal_core::Error::Invariant("x".into()).into();
        assert_eq!(exit_code(&core(recal_core::Error::Invariant("x".into()))), EXIT_FAILURE);
        assert_eq!(exit_code(&err), EXIT_FAILURE);
    }

    #[test]
    fn csv_uses_lf_and_empty_metric_cells() {
        let cfg = ExperimentConfig {
            forecaster: ForecasterKind::Approach,
            rule: ScoringRule::brier(),
            resolution: Resolution::Grid(4),
            horizon: 5,
            oracle: OracleSpec::Constant(0.5),
            labels: "periodic:01".parse().unwrap(),
            seed: 1,
        };
        let text = String::from_utf8(trace_csv(&run_experiment(&cfg).unwrap()).unwrap()).unwrap();
        assert!(!text.contains('\r'));
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,q,p,y,calib_l1,avg_regret,recal_rate,dist_to_target");
        assert_eq!(lines.len(), 6);
        // rounds 1, 2, 4 and 5 are checkpoints
        assert!(!lines[1].ends_with(",,,,"));
        assert!(lines[3].ends_with(",,,,"));
        assert!(!lines[4].ends_with(",,,,"));
        assert!(!lines[5].ends_with(",,,,"));
        assert!(lines[1].starts_with("1,0.5,0.5,0,"));
    }
}
