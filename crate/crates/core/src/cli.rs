//! The `stopcal` command line: batch backtests across assets, single-asset
//! calibration dumps, cross-asset reports and synthetic data generation.
//!
//! Settings come from built-in defaults, then an optional INI file
//! (`--config`), then command-line flags, each layer overriding the last.
//!
//! ```ini
//! [run]
//! modes = signal-only,t-method,r-method
//! out = runs/demo
//! jobs = 4
//! seed = 7
//!
//! [backtest]
//! initial_cash = 100000
//! min_corpus = 30
//! recalibrate = per-entry
//!
//! [drawdown-stats]
//! n_policy = sqrt
//!
//! [rolling]
//! horizon_l = 20
//! window_m = 250
//!
//! [assets]
//! SPY = data/SPY.csv
//! SYN = gbm:seed=3,sigma=0.25,days=120
//! ```

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand};
use ini::Ini;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::analytics::{
    aggregate, delta_nlv, error_analysis, read_comparison_csv, scatter, write_comparison_csv, write_scatter_csv,
    AssetComparison, Column,
};
use crate::backtest::{calibrate_series, run_backtest, BacktestConfig, BacktestResult, BinPolicy, Mode, Recalibration};
use crate::drawdown_stats::ThresholdReport;
use crate::error::{Error, Result};
use crate::market_data::{generate_gbm, generate_planted, load_csv, save_csv, BarSeries, PlantedSpec, MINUTES_PER_DAY};
use crate::rolling::RollingParams;

pub const EXIT_SUCCESS: i32 = 0;
pub const EXIT_TOTAL_FAILURE: i32 = 1;
pub const EXIT_PARTIAL_FAILURE: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Parser)]
#[command(name = "stopcal", version, about = "Calibrated trailing stops for an hourly SMA strategy")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Backtest every (asset, mode) pair and write result bundles.
    Backtest(BacktestArgs),
    /// Calibrate a threshold for one asset and dump the histogram.
    Calibrate(CalibrateArgs),
    /// Aggregate a comparison table and correlate it with trade counts.
    Report(ReportArgs),
    /// Write a synthetic price series.
    Synth(SynthArgs),
}

/// Strategy and calibration parameters shared by `backtest` and `calibrate`.
#[derive(Debug, Clone, Default, Args)]
pub struct ParamArgs {
    /// INI configuration file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Fixed number of drawdown bins (implies `--n-policy fixed`).
    #[arg(long)]
    pub n_bins: Option<usize>,
    /// `sqrt` or `fixed`.
    #[arg(long)]
    pub n_policy: Option<String>,
    /// Holding horizon of artificial trades, in hours.
    #[arg(long)]
    pub horizon_l: Option<usize>,
    /// Number of recent artificial trades used for calibration.
    #[arg(long)]
    pub window_m: Option<usize>,
    /// `per-entry`, or an interval in hours such as `24h`.
    #[arg(long)]
    pub recalibrate: Option<String>,
    /// Trades required before any stop is armed.
    #[arg(long)]
    pub min_corpus: Option<usize>,
    #[arg(long)]
    pub initial_cash: Option<f64>,
    #[arg(long)]
    pub sma_period: Option<usize>,
    /// Use this threshold instead of calibrating.
    #[arg(long)]
    pub fixed_threshold: Option<f64>,
    /// Keep the force-closed final trade out of calibration corpora.
    #[arg(long)]
    pub exclude_forced: bool,
}

#[derive(Debug, Clone, Args)]
pub struct BacktestArgs {
    #[command(flatten)]
    pub params: ParamArgs,
    /// `ID=path.csv`, `ID=gbm:k=v,..`, `ID=planted:k=v,..` or a bare CSV path.
    #[arg(long)]
    pub asset: Vec<String>,
    /// Directory whose `*.csv` files are all loaded as assets.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Modes to run; defaults to all four.
    #[arg(long, value_delimiter = ',')]
    pub mode: Vec<String>,
    /// Base seed for synthetic assets that do not set their own.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads; defaults to available cores capped by asset count.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub params: ParamArgs,
    #[arg(long)]
    pub asset: String,
    /// `t` (Signal-Only trades) or `r` (rolling artificial trades).
    #[arg(long, alias = "mode", default_value = "t")]
    pub method: String,
    /// Only trades that closed strictly before this RFC 3339 instant are used.
    #[arg(long)]
    pub as_of: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Comparison table written by `backtest`.
    pub table: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// `gbm:p0=100,mu=0.05,sigma=0.2,days=60` or `planted:d_star=0.02,trades=100`.
    #[arg(long)]
    pub spec: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// A synthetic series recipe. The seed is kept separately so that a spec
/// can be reused across seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SynthSpec {
    Gbm { p0: f64, mu: f64, sigma: f64, minutes: usize },
    Planted(PlantedSpec),
}

impl SynthSpec {
    /// Parses `kind:key=value,...`, returning the spec and any `seed` key.
    pub fn parse(text: &str) -> Result<(Self, Option<u64>)> {
        let (kind, rest) = text.split_once(':').unwrap_or((text, ""));
        let mut seed = None;
        let mut pairs = Vec::new();
        for item in rest.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::InvalidParameter(format!("expected key=value in `{item}`")))?;
            if k.trim() == "seed" {
                seed = Some(parse_value::<u64>("seed", v)?);
            } else {
                pairs.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        let spec = match kind.trim() {
            "gbm" => {
                let (mut p0, mut mu, mut sigma, mut minutes) = (100.0, 0.0, 0.2, 60 * MINUTES_PER_DAY as usize);
                for (k, v) in &pairs {
                    match k.as_str() {
                        "p0" => p0 = parse_value(k, v)?,
                        "mu" => mu = parse_value(k, v)?,
                        "sigma" => sigma = parse_value(k, v)?,
                        "minutes" => minutes = parse_value(k, v)?,
                        "days" => minutes = parse_value::<usize>(k, v)? * MINUTES_PER_DAY as usize,
                        _ => return Err(Error::InvalidParameter(format!("unknown gbm key `{k}`"))),
                    }
                }
                SynthSpec::Gbm { p0, mu, sigma, minutes }
            }
            "planted" => {
                let mut spec = PlantedSpec::default();
                for (k, v) in &pairs {
                    match k.as_str() {
                        "d_star" => spec.d_star = parse_value(k, v)?,
                        "gain" => spec.gain = parse_value(k, v)?,
                        "loss" => spec.loss = parse_value(k, v)?,
                        "trades" | "n_trades" => spec.n_trades = parse_value(k, v)?,
                        "loser_fraction" => spec.loser_fraction = parse_value(k, v)?,
                        _ => return Err(Error::InvalidParameter(format!("unknown planted key `{k}`"))),
                    }
                }
                SynthSpec::Planted(spec)
            }
            other => return Err(Error::InvalidParameter(format!("unknown synthetic kind `{other}`"))),
        };
        Ok((spec, seed))
    }

    pub fn generate(&self, seed: u64) -> Result<BarSeries> {
        match self {
            SynthSpec::Gbm { p0, mu, sigma, minutes } => generate_gbm(seed, *p0, *mu, *sigma, *minutes),
            SynthSpec::Planted(spec) => Ok(generate_planted(seed, spec)?.series),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidParameter(format!("bad value `{value}` for `{key}`")))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum AssetSource {
    Csv { path: PathBuf },
    Synthetic { spec: SynthSpec, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssetSpec {
    pub asset_id: String,
    #[serde(flatten)]
    pub source: AssetSource,
}

impl AssetSpec {
    /// Parses `ID=source` or a bare CSV path. Synthetic sources without a
    /// `seed` key get `default_seed`.
    pub fn parse(text: &str, default_seed: u64) -> Result<Self> {
        let (id, source) = match text.split_once('=') {
            Some((id, source)) if !id.contains(':') && !id.contains('/') => (id.trim().to_string(), source.trim()),
            _ => {
                let path = Path::new(text.trim());
                let id = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| Error::InvalidParameter(format!("cannot derive an asset id from `{text}`")))?;
                (id.to_string(), text.trim())
            }
        };
        Self::with_id(id, source, default_seed)
    }

    fn with_id(asset_id: String, source: &str, default_seed: u64) -> Result<Self> {
        if asset_id.is_empty() || asset_id.contains(['/', '\\']) || asset_id == "." || asset_id == ".." {
            return Err(Error::InvalidParameter(format!("bad asset id `{asset_id}`")));
        }
        let source = if source.starts_with("gbm:") || source.starts_with("planted:") || source == "gbm" || source == "planted" {
            let (spec, seed) = SynthSpec::parse(source)?;
            AssetSource::Synthetic {
                spec,
                seed: seed.unwrap_or(default_seed),
            }
        } else {
            AssetSource::Csv { path: PathBuf::from(source) }
        };
        Ok(Self { asset_id, source })
    }

    pub fn load(&self) -> Result<BarSeries> {
        match &self.source {
            AssetSource::Csv { path } => load_csv(path, &self.asset_id),
            AssetSource::Synthetic { spec, seed } => Ok(spec.generate(*seed)?.with_asset_id(self.asset_id.clone())),
        }
    }
}

/// Everything one `backtest` invocation needs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub assets: Vec<AssetSpec>,
    pub config: BacktestConfig,
    pub modes: Vec<Mode>,
    pub output_dir: PathBuf,
    pub parallelism: usize,
}

impl RunManifest {
    pub fn validate(&self) -> Result<()> {
        if self.assets.is_empty() {
            return Err(Error::InvalidParameter("no assets given".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::InvalidParameter("no modes given".into()));
        }
        let mut seen = BTreeSet::new();
        for a in &self.assets {
            if !seen.insert(a.asset_id.as_str()) {
                return Err(Error::InvalidParameter(format!("duplicate asset id `{}`", a.asset_id)));
            }
        }
        if self.parallelism == 0 {
            return Err(Error::InvalidParameter("jobs must be at least 1".into()));
        }
        self.config.validate()
    }

    /// Builds a manifest from defaults, the config file and flags.
    pub fn from_args(args: &BacktestArgs) -> Result<Self> {
        let file = ConfigFile::load(args.params.config.as_deref())?;
        let config = build_config(&file, &args.params)?;

        let default_seed = match args.seed {
            Some(s) => s,
            None => file.get("run", "seed").map(|v| parse_value("seed", v)).transpose()?.unwrap_or(0),
        };
        let mut specs: Vec<(String, String)> = file.assets.clone();
        if let Some(dir) = args.data.clone().or_else(|| file.get("run", "data").map(PathBuf::from)) {
            for path in csv_files_in(&dir)? {
                specs.push((String::new(), path.to_string_lossy().into_owned()));
            }
        }
        let mut assets = Vec::new();
        for (k, (id, source)) in specs.iter().enumerate() {
            let seed = default_seed.wrapping_add(k as u64);
            assets.push(if id.is_empty() {
                AssetSpec::parse(source, seed)?
            } else {
                AssetSpec::with_id(id.clone(), source, seed)?
            });
        }
        let offset = assets.len();
        for (k, text) in args.asset.iter().enumerate() {
            assets.push(AssetSpec::parse(text, default_seed.wrapping_add((offset + k) as u64))?);
        }

        let mode_names: Vec<String> = if !args.mode.is_empty() {
            args.mode.clone()
        } else if let Some(m) = file.get("run", "modes") {
            m.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
        } else {
            Mode::ALL.iter().map(|m| m.as_str().to_string()).collect()
        };
        let mut modes = Vec::new();
        for name in &mode_names {
            let mode: Mode = name.parse()?;
            if !modes.contains(&mode) {
                modes.push(mode);
            }
        }

        let output_dir = args
            .out
            .clone()
            .or_else(|| file.get("run", "out").map(PathBuf::from))
            .ok_or_else(|| Error::InvalidParameter("no output directory (--out)".into()))?;
        let jobs = match args.jobs {
            Some(j) => Some(j),
            None => file.get("run", "jobs").map(|v| parse_value("jobs", v)).transpose()?,
        };
        let parallelism = jobs.unwrap_or_else(|| {
            let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
            cores.min(assets.len()).max(1)
        });

        let manifest = Self {
            assets,
            config,
            modes,
            output_dir,
            parallelism,
        };
        manifest.validate()?;
        Ok(manifest)
    }
}

fn csv_files_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Parsed INI file, or nothing when no file was given.
#[derive(Debug, Default)]
struct ConfigFile {
    ini: Option<Ini>,
    assets: Vec<(String, String)>,
}

impl ConfigFile {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let ini = Ini::load_from_file(path)
            .map_err(|e| Error::InvalidParameter(format!("{}: {e}", path.display())))?;
        let assets = ini
            .section(Some("assets"))
            .map(|s| s.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect())
            .unwrap_or_default();
        Ok(Self { ini: Some(ini), assets })
    }

    fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.ini.as_ref()?.section(Some(section))?.get(key).map(str::trim)
    }
}

fn build_config(file: &ConfigFile, flags: &ParamArgs) -> Result<BacktestConfig> {
    fn pick<T: FromStr>(flag: Option<T>, file: &ConfigFile, section: &str, key: &str) -> Result<Option<T>> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => file.get(section, key).map(|v| parse_value(key, v)).transpose(),
        }
    }

    let mut config = BacktestConfig::default();
    if let Some(v) = pick(flags.initial_cash, file, "backtest", "initial_cash")? {
        config.initial_cash = v;
    }
    if let Some(v) = pick(flags.sma_period, file, "backtest", "sma_period")? {
        config.sma_period = v;
    }
    if let Some(v) = pick(flags.min_corpus, file, "backtest", "min_corpus")? {
        config.min_corpus = v;
    }
    if let Some(v) = pick(flags.fixed_threshold, file, "backtest", "fixed_threshold")? {
        config.fixed_threshold = Some(v);
    }
    config.include_forced_final_trade =
        !flags.exclude_forced && pick(None, file, "backtest", "include_forced_final_trade")?.unwrap_or(true);
    if let Some(v) = flags.recalibrate.as_deref().or_else(|| file.get("backtest", "recalibrate")) {
        config.recalibration = v.parse::<Recalibration>()?;
    }

    let n_bins: Option<usize> = pick(flags.n_bins, file, "drawdown-stats", "n_bins")?;
    let policy = flags.n_policy.as_deref().or_else(|| file.get("drawdown-stats", "n_policy"));
    config.n_policy = match (policy.map(|p| p.trim().to_ascii_lowercase()), n_bins) {
        (Some(p), _) if p == "sqrt" => BinPolicy::Sqrt,
        (Some(p), Some(n)) if p == "fixed" => BinPolicy::Fixed(n),
        (Some(p), None) if p == "fixed" => {
            return Err(Error::InvalidParameter("`fixed` bin policy needs --n-bins".into()))
        }
        (Some(p), _) => return Err(Error::InvalidParameter(format!("unknown bin policy `{p}`"))),
        (None, Some(n)) => BinPolicy::Fixed(n),
        (None, None) => BinPolicy::Sqrt,
    };

    let horizon = pick(flags.horizon_l, file, "rolling", "horizon_l")?.unwrap_or(config.rolling.horizon);
    let window = pick(flags.window_m, file, "rolling", "window_m")?.unwrap_or(config.rolling.window);
    config.rolling = RollingParams::new(horizon, window)?;
    config.validate()?;
    Ok(config)
}

/// Result of one (asset, mode) job.
#[derive(Debug)]
pub struct JobOutcome {
    pub asset_id: String,
    pub mode: Mode,
    pub result: Result<BacktestResult>,
}

#[derive(Debug)]
pub struct BacktestRun {
    pub jobs: Vec<JobOutcome>,
    pub comparisons: Vec<AssetComparison>,
    pub exit_code: i32,
}

impl BacktestRun {
    pub fn failed_jobs(&self) -> usize {
        self.jobs.iter().filter(|j| j.result.is_err()).count()
    }
}

struct AssetRun {
    jobs: Vec<JobOutcome>,
    comparison: Option<AssetComparison>,
}

fn run_asset(asset: &AssetSpec, manifest: &RunManifest) -> AssetRun {
    let series = match asset.load() {
        Ok(s) => s,
        Err(e) => {
            let jobs = manifest
                .modes
                .iter()
                .map(|&mode| JobOutcome {
                    asset_id: asset.asset_id.clone(),
                    mode,
                    result: Err(Error::InvalidParameter(format!("could not load asset: {e}"))),
                })
                .collect();
            return AssetRun { jobs, comparison: None };
        }
    };
    let jobs: Vec<JobOutcome> = manifest
        .modes
        .iter()
        .map(|&mode| JobOutcome {
            asset_id: asset.asset_id.clone(),
            mode,
            result: run_backtest(&series, &manifest.config.with_mode(mode)),
        })
        .collect();

    let final_nlv = |jobs: &[JobOutcome], mode: Mode| {
        jobs.iter()
            .find(|j| j.mode == mode)
            .and_then(|j| j.result.as_ref().ok())
            .map(|r| (r.final_nlv, r.trades.len()))
    };
    // The comparison always needs the Signal-Only baseline, requested or not.
    let baseline = final_nlv(&jobs, Mode::SignalOnly).or_else(|| {
        run_backtest(&series, &manifest.config.with_mode(Mode::SignalOnly))
            .ok()
            .map(|r| (r.final_nlv, r.trades.len()))
    });
    let comparison = baseline.map(|(base, trades)| {
        let delta = |mode| final_nlv(&jobs, mode).and_then(|(nlv, _)| delta_nlv(nlv, base).ok());
        AssetComparison {
            asset_id: asset.asset_id.clone(),
            delta_nlv_ts: delta(Mode::TMethod),
            delta_nlv_rs: delta(Mode::RMethod),
            signal_only_trades: trades,
        }
    });
    AssetRun { jobs, comparison }
}

/// Runs every (asset, mode) job and writes
/// `<out>/<asset>/<mode>/{trades,equity,thresholds}.csv` + `summary.json`,
/// `<out>/comparison.csv`, `<out>/manifest.json` and `<out>/run.log`.
///
/// Jobs run on a worker pool and only return results; all files are
/// written afterwards in manifest order, so the output tree depends only on
/// the manifest.
pub fn cmd_backtest(manifest: &RunManifest) -> Result<BacktestRun> {
    manifest.validate()?;
    let out = &manifest.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(manifest.parallelism)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("cannot start worker pool: {e}")))?;
    let runs: Vec<AssetRun> = pool.install(|| manifest.assets.par_iter().map(|a| run_asset(a, manifest)).collect());

    let mut log = String::new();
    let mut jobs = Vec::new();
    let mut comparisons = Vec::new();
    for run in runs {
        for mut job in run.jobs {
            if let Ok(result) = &job.result {
                let dir = out.join(&job.asset_id).join(job.mode.as_str());
                if let Err(e) = result.write_bundle(&dir) {
                    job.result = Err(e);
                }
            }
            match &job.result {
                Ok(r) => log.push_str(&format!(
                    "ok asset={} mode={} trades={} thresholds={} final_nlv={}\n",
                    job.asset_id,
                    job.mode,
                    r.trades.len(),
                    r.thresholds_used.len(),
                    r.final_nlv
                )),
                Err(e) => log.push_str(&format!(
                    "error asset={} mode={} kind={} message={}\n",
                    job.asset_id,
                    job.mode,
                    e.kind(),
                    e
                )),
            }
            jobs.push(job);
        }
        comparisons.extend(run.comparison);
    }

    let path = out.join("comparison.csv");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_comparison_csv(&comparisons, BufWriter::new(file)).map_err(|e| Error::io(&path, e))?;
    write_text(&out.join("manifest.json"), &(serde_json::to_string_pretty(manifest)? + "\n"))?;

    let failed = jobs.iter().filter(|j| j.result.is_err()).count();
    let exit_code = if failed == 0 {
        EXIT_SUCCESS
    } else if failed == jobs.len() {
        EXIT_TOTAL_FAILURE
    } else {
        EXIT_PARTIAL_FAILURE
    };
    log.push_str(&format!("jobs={} failed={} exit={}\n", jobs.len(), failed, exit_code));
    write_text(&out.join("run.log"), &log)?;
    Ok(BacktestRun {
        jobs,
        comparisons,
        exit_code,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn error_json(e: &Error) -> Value {
    json!({ "error": e.kind(), "message": e.to_string() })
}

#[derive(Debug, Clone)]
pub struct CalibrateRequest {
    pub asset: AssetSpec,
    /// `TMethod` or `RMethod`.
    pub method: Mode,
    pub as_of: Option<DateTime<Utc>>,
    pub config: BacktestConfig,
    pub output_dir: PathBuf,
}

#[derive(Serialize)]
struct CalibrationFile<'a> {
    asset: &'a str,
    method: Mode,
    as_of: Option<DateTime<Utc>>,
    n_policy: BinPolicy,
    #[serde(flatten)]
    report: &'a ThresholdReport,
}

/// Calibrates one threshold and writes `threshold.json` and
/// `histogram.csv`. On failure `error.json` holds the error kind and
/// message instead.
pub fn cmd_calibrate(request: &CalibrateRequest) -> Result<ThresholdReport> {
    let out = &request.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    match calibrate_for(request) {
        Ok(report) => {
            let file = CalibrationFile {
                asset: &request.asset.asset_id,
                method: request.method,
                as_of: request.as_of,
                n_policy: request.config.n_policy,
                report: &report,
            };
            write_text(&out.join("threshold.json"), &(serde_json::to_string_pretty(&file)? + "\n"))?;
            let path = out.join("histogram.csv");
            let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            report.write_histogram_csv(BufWriter::new(f)).map_err(|e| Error::io(&path, e))?;
            Ok(report)
        }
        Err(e) => {
            write_text(&out.join("error.json"), &(serde_json::to_string_pretty(&error_json(&e))? + "\n"))?;
            Err(e)
        }
    }
}

fn calibrate_for(request: &CalibrateRequest) -> Result<ThresholdReport> {
    let series = request.asset.load()?;
    calibrate_series(&series, &request.config.with_mode(request.method), request.as_of)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutcome {
    pub rows: usize,
    pub failures: usize,
    pub exit_code: i32,
}

/// Writes `summary.json` (aggregates per delta column), `scatter_ts.csv`,
/// `scatter_rs.csv` and `correlation.json`. A column whose aggregate or
/// correlation cannot be computed gets an error object in its place.
pub fn cmd_report(table: &Path, out: &Path) -> Result<ReportOutcome> {
    let file = fs::File::open(table).map_err(|e| Error::io(table, e))?;
    let rows = read_comparison_csv(file)?;
    if rows.is_empty() {
        return Err(Error::EmptyInput);
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut summary = Map::new();
    let mut correlation = Map::new();
    let mut failures = 0;
    for column in [Column::Ts, Column::Rs] {
        let key = column.to_string();
        summary.insert(
            key.clone(),
            match aggregate(&rows, column) {
                Ok(a) => serde_json::to_value(a)?,
                Err(e) => {
                    failures += 1;
                    error_json(&e)
                }
            },
        );
        correlation.insert(
            key.clone(),
            match error_analysis(&rows, column) {
                Ok(a) => serde_json::to_value(a.correlation)?,
                Err(e) => {
                    failures += 1;
                    error_json(&e)
                }
            },
        );
        let path = out.join(format!("scatter_{}.csv", key.to_ascii_lowercase()));
        let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_scatter_csv(&scatter(&rows, column), BufWriter::new(f)).map_err(|e| Error::io(&path, e))?;
    }
    write_text(&out.join("summary.json"), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    write_text(&out.join("correlation.json"), &(serde_json::to_string_pretty(&correlation)? + "\n"))?;
    Ok(ReportOutcome {
        rows: rows.len(),
        failures,
        exit_code: if failures == 0 { EXIT_SUCCESS } else { EXIT_PARTIAL_FAILURE },
    })
}

/// Writes the series to `out`. Planted series also get
/// `<out>.planted.json` recording the planted threshold.
pub fn cmd_synth(spec: &SynthSpec, seed: u64, out: &Path) -> Result<()> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    match spec {
        SynthSpec::Gbm { .. } => save_csv(&spec.generate(seed)?, out),
        SynthSpec::Planted(planted_spec) => {
            let planted = generate_planted(seed, planted_spec)?;
            save_csv(&planted.series, out)?;
            let sidecar = json!({
                "seed": seed,
                "spec": planted_spec,
                "d_star": planted.known_threshold,
                "n_winners": planted.n_winners,
                "n_losers": planted.n_losers,
                "all_winners": planted.all_winners,
            });
            let mut name = out.as_os_str().to_owned();
            name.push(".planted.json");
            write_text(Path::new(&name), &(serde_json::to_string_pretty(&sidecar)? + "\n"))
        }
    }
}

fn parse_as_of(text: &str) -> Result<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(text.trim())
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| Error::InvalidParameter(format!("bad --as-of `{text}`: {e}")))
}

fn usage(e: Error) -> i32 {
    eprintln!("stopcal: {e}");
    EXIT_USAGE
}

fn failure(e: Error) -> i32 {
    eprintln!("stopcal: {} ({})", e, e.kind());
    EXIT_TOTAL_FAILURE
}

/// Parses `args` (including the program name) and runs the subcommand,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_SUCCESS };
            let _ = e.print();
            return code;
        }
    };
    match cli.command {
        Command::Backtest(args) => {
            let manifest = match RunManifest::from_args(&args) {
                Ok(m) => m,
                Err(e) => return usage(e),
            };
            match cmd_backtest(&manifest) {
                Ok(run) => {
                    for job in run.jobs.iter().filter(|j| j.result.is_err()) {
                        if let Err(e) = &job.result {
                            eprintln!("stopcal: {} {}: {e}", job.asset_id, job.mode);
                        }
                    }
                    run.exit_code
                }
                Err(e) => failure(e),
            }
        }
        Command::Calibrate(args) => {
            let request = (|| -> Result<CalibrateRequest> {
                let file = ConfigFile::load(args.params.config.as_deref())?;
                let method: Mode = args.method.parse()?;
                if !matches!(method, Mode::TMethod | Mode::RMethod) {
                    return Err(Error::InvalidParameter("--method must be `t` or `r`".into()));
                }
                Ok(CalibrateRequest {
                    asset: AssetSpec::parse(&args.asset, args.seed.unwrap_or(0))?,
                    method,
                    as_of: args.as_of.as_deref().map(parse_as_of).transpose()?,
                    config: build_config(&file, &args.params)?,
                    output_dir: args.out.clone(),
                })
            })();
            match request {
                Ok(request) => match cmd_calibrate(&request) {
                    Ok(report) => {
                        println!("T = {} (bin {} of {}, corpus {})", report.threshold, report.k_star + 1, report.n_bins, report.corpus_size);
                        EXIT_SUCCESS
                    }
                    Err(e) => failure(e),
                },
                Err(e) => usage(e),
            }
        }
        Command::Report(args) => match cmd_report(&args.table, &args.out) {
            Ok(outcome) => outcome.exit_code,
            Err(e) => failure(e),
        },
        Command::Synth(args) => {
            let (spec, seed) = match SynthSpec::parse(&args.spec) {
                Ok(parsed) => parsed,
                Err(e) => return usage(e),
            };
            match cmd_synth(&spec, seed.unwrap_or(args.seed), &args.out) {
                Ok(()) => EXIT_SUCCESS,
                Err(e) => failure(e),
            }
        }
    }
}
