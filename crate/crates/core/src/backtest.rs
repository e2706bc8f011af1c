//! Backtests with calibrated trailing stops.
//!
//! Entries and signal exits follow the Signal-Only rules exactly. In the
//! T and R modes a trailing stop is layered on top: while long, the
//! position is closed at the first minute bar whose price is at or below
//! `(1 - T)` times the highest price seen since entry. `T` comes from the
//! most recent calibration, which only ever sees trades that closed
//! strictly before the calibration instant.

use std::fmt;
use std::fs;
use std::io::BufWriter;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::drawdown_stats::{bin_trades, calibrate_threshold, default_bin_count, ThresholdReport};
use crate::error::{Error, Result};
use crate::market_data::{format_timestamp, to_hourly_grid, BarSeries, HourlyGrid};
use crate::rolling::{calibrate_r, generate_artificial_trades, recent_window, RollingParams};
use crate::signal::{
    compute_sma, max_drawdown_of, run_signal_only, simulate, write_trades_csv, EquityCurve, ExitReason,
    SmaSeries, StopPolicy, TradeKind, TradeRecord, DEFAULT_SMA_PERIOD,
};

pub const DEFAULT_INITIAL_CASH: f64 = 100_000.0;
pub const DEFAULT_MIN_CORPUS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    SignalOnly,
    TMethod,
    RMethod,
    BuyAndHold,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::SignalOnly, Mode::TMethod, Mode::RMethod, Mode::BuyAndHold];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::SignalOnly => "signal-only",
            Mode::TMethod => "t-method",
            Mode::RMethod => "r-method",
            Mode::BuyAndHold => "buy-and-hold",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "signal-only" | "signal" | "s" => Ok(Mode::SignalOnly),
            "t-method" | "t" => Ok(Mode::TMethod),
            "r-method" | "r" => Ok(Mode::RMethod),
            "buy-and-hold" | "buyhold" | "bh" => Ok(Mode::BuyAndHold),
            other => Err(Error::InvalidParameter(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinPolicy {
    Fixed(usize),
    Sqrt,
}

impl BinPolicy {
    pub fn resolve(&self, corpus_size: usize) -> usize {
        match *self {
            BinPolicy::Fixed(n) => n,
            BinPolicy::Sqrt => default_bin_count(corpus_size),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recalibration {
    /// Calibrate at every entry; the threshold is fixed for the trade's life.
    PerEntry,
    /// Calibrate at the first hourly point at least this many hours after
    /// the previous calibration. Applies to open positions too.
    FixedInterval { hours: u32 },
}

impl FromStr for Recalibration {
    type Err = Error;

    /// `per-entry`, or an interval in hours such as `24` or `24h`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "per-entry" || s == "entry" {
            return Ok(Recalibration::PerEntry);
        }
        let digits = s.strip_suffix('h').unwrap_or(&s);
        match digits.parse::<u32>() {
            Ok(hours) if hours > 0 => Ok(Recalibration::FixedInterval { hours }),
            _ => Err(Error::InvalidParameter(format!("bad recalibration schedule `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestConfig {
    pub mode: Mode,
    pub initial_cash: f64,
    pub sma_period: usize,
    pub n_policy: BinPolicy,
    pub rolling: RollingParams,
    pub recalibration: Recalibration,
    pub min_corpus: usize,
    pub include_forced_final_trade: bool,
    /// Skip calibration and use this threshold throughout.
    pub fixed_threshold: Option<f64>,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            mode: Mode::SignalOnly,
            initial_cash: DEFAULT_INITIAL_CASH,
            sma_period: DEFAULT_SMA_PERIOD,
            n_policy: BinPolicy::Sqrt,
            rolling: RollingParams::default(),
            recalibration: Recalibration::PerEntry,
            min_corpus: DEFAULT_MIN_CORPUS,
            include_forced_final_trade: true,
            fixed_threshold: None,
        }
    }
}

impl BacktestConfig {
    pub fn with_mode(&self, mode: Mode) -> Self {
        Self { mode, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_cash > 0.0) || !self.initial_cash.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "initial cash must be positive, got {}",
                self.initial_cash
            )));
        }
        if self.min_corpus == 0 {
            return Err(Error::InvalidParameter("min_corpus must be at least 1".into()));
        }
        if self.sma_period == 0 {
            return Err(Error::InvalidParameter("SMA period must be at least 1".into()));
        }
        if self.n_policy == BinPolicy::Fixed(0) {
            return Err(Error::InvalidParameter("bin count must be at least 1".into()));
        }
        RollingParams::new(self.rolling.horizon, self.rolling.window)?;
        if let Some(t) = self.fixed_threshold {
            if !(t > 0.0) {
                return Err(Error::InvalidParameter(format!("fixed threshold must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultFlags {
    /// Stops were required but never armed.
    pub calibration_unavailable: bool,
    pub calibrations_attempted: usize,
    /// Attempts skipped because the corpus was below `min_corpus`.
    pub warmup_skips: usize,
    /// Attempts where every corpus drawdown was zero.
    pub all_zero_drawdowns: usize,
    /// Armed thresholds whose best cumulative expectation was negative.
    pub expected_return_negative: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestResult {
    pub asset_id: String,
    pub mode: Mode,
    pub initial_cash: f64,
    pub trades: Vec<TradeRecord>,
    pub curve: EquityCurve,
    pub final_nlv: f64,
    pub thresholds_used: Vec<(DateTime<Utc>, f64)>,
    pub flags: ResultFlags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub asset: String,
    pub mode: Mode,
    pub initial_cash: f64,
    pub final_nlv: f64,
    pub trade_count: usize,
    pub stop_exits: usize,
    pub signal_exits: usize,
    pub forced_exits: usize,
    pub thresholds_used: usize,
    pub flags: ResultFlags,
}

impl BacktestResult {
    /// The threshold active at `ts`: the latest calibration at or before it.
    pub fn threshold_at(&self, ts: DateTime<Utc>) -> Option<f64> {
        let k = self.thresholds_used.partition_point(|(t, _)| *t <= ts);
        k.checked_sub(1).map(|i| self.thresholds_used[i].1)
    }

    pub fn summary(&self) -> RunSummary {
        let count = |r: ExitReason| self.trades.iter().filter(|t| t.exit_reason == r).count();
        RunSummary {
            asset: self.asset_id.clone(),
            mode: self.mode,
            initial_cash: self.initial_cash,
            final_nlv: self.final_nlv,
            trade_count: self.trades.len(),
            stop_exits: count(ExitReason::Stop),
            signal_exits: count(ExitReason::Signal),
            forced_exits: count(ExitReason::Forced),
            thresholds_used: self.thresholds_used.len(),
            flags: self.flags.clone(),
        }
    }

    /// Writes `trades.csv`, `equity.csv`, `thresholds.csv` and `summary.json`.
    pub fn write_bundle(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let create = |name: &str| {
            let path = dir.join(name);
            fs::File::create(&path)
                .map(BufWriter::new)
                .map_err(|e| Error::io(path, e))
        };
        write_trades_csv(&self.trades, create("trades.csv")?).map_err(|e| Error::io(dir.join("trades.csv"), e))?;
        self.curve
            .write_csv(create("equity.csv")?)
            .map_err(|e| Error::io(dir.join("equity.csv"), e))?;
        {
            use std::io::Write;
            let mut out = create("thresholds.csv")?;
            let path = dir.join("thresholds.csv");
            writeln!(out, "timestamp,T").map_err(|e| Error::io(&path, e))?;
            for (ts, t) in &self.thresholds_used {
                writeln!(out, "{},{}", format_timestamp(ts), t).map_err(|e| Error::io(&path, e))?;
            }
            out.flush().map_err(|e| Error::io(&path, e))?;
        }
        let json = serde_json::to_string_pretty(&self.summary())?;
        let path = dir.join("summary.json");
        fs::write(&path, json + "\n").map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

enum Calibration {
    Armed { threshold: f64, negative: bool },
    Warmup,
    AllZero,
}

/// A calibration corpus source. Corpora are sorted by exit time, and a
/// calibration at instant `at` sees only trades that exited strictly before
/// it.
struct Calibrator<'a> {
    corpus: Vec<TradeRecord>,
    config: &'a BacktestConfig,
    rolling_window: Option<usize>,
}

impl Calibrator<'_> {
    fn calibrate(&self, at: DateTime<Utc>) -> Calibration {
        if let Some(t) = self.config.fixed_threshold {
            return Calibration::Armed {
                threshold: t,
                negative: false,
            };
        }
        let visible = self.corpus.partition_point(|t| t.exit_time < at);
        let mut corpus: Vec<TradeRecord> = self.corpus[..visible]
            .iter()
            .filter(|t| self.config.include_forced_final_trade || !t.is_forced())
            .cloned()
            .collect();
        if let Some(m) = self.rolling_window {
            corpus = recent_window(&corpus, m);
        }
        if corpus.len() < self.config.min_corpus {
            return Calibration::Warmup;
        }
        let n = self.config.n_policy.resolve(corpus.len());
        match bin_trades(&corpus, n).and_then(|bins| calibrate_threshold(&bins)) {
            Ok(report) => Calibration::Armed {
                threshold: report.threshold,
                negative: report.expected_return_negative,
            },
            Err(_) => Calibration::AllZero,
        }
    }
}

struct CalibratedStops<'a> {
    calibrator: Calibrator<'a>,
    schedule: Recalibration,
    active: Option<f64>,
    last_calibrated: Option<DateTime<Utc>>,
    thresholds_used: Vec<(DateTime<Utc>, f64)>,
    flags: ResultFlags,
}

impl CalibratedStops<'_> {
    fn recalibrate(&mut self, at: DateTime<Utc>) {
        self.flags.calibrations_attempted += 1;
        match self.calibrator.calibrate(at) {
            Calibration::Armed { threshold, negative } => {
                self.active = Some(threshold);
                self.last_calibrated = Some(at);
                self.thresholds_used.push((at, threshold));
                if negative {
                    self.flags.expected_return_negative += 1;
                }
            }
            // A failed attempt leaves any previously armed threshold in place.
            Calibration::Warmup => self.flags.warmup_skips += 1,
            Calibration::AllZero => self.flags.all_zero_drawdowns += 1,
        }
    }
}

impl StopPolicy for CalibratedStops<'_> {
    fn on_grid(&mut self, _grid_index: usize, at: DateTime<Utc>) {
        if let Recalibration::FixedInterval { hours } = self.schedule {
            let due = match self.last_calibrated {
                None => true,
                Some(last) => at - last >= Duration::hours(hours as i64),
            };
            if due {
                self.recalibrate(at);
            }
        }
    }

    fn on_entry(&mut self, at: DateTime<Utc>) {
        if self.schedule == Recalibration::PerEntry {
            self.recalibrate(at);
        }
    }

    fn threshold(&self) -> Option<f64> {
        self.active
    }
}

fn prepare(series: &BarSeries, config: &BacktestConfig) -> Result<(HourlyGrid, SmaSeries)> {
    config.validate()?;
    let grid = to_hourly_grid(series);
    let sma = compute_sma(&grid, config.sma_period)?;
    Ok((grid, sma))
}

pub fn run_backtest(series: &BarSeries, config: &BacktestConfig) -> Result<BacktestResult> {
    let (grid, sma) = prepare(series, config)?;
    match config.mode {
        Mode::SignalOnly => {
            let out = run_signal_only(series, &sma, &grid, config.initial_cash)?;
            Ok(finish(series, config, out.trades, out.curve, Vec::new(), ResultFlags::default()))
        }
        Mode::BuyAndHold => Ok(run_buy_and_hold(series, &grid, &sma, config)),
        Mode::TMethod => {
            let shadow = run_signal_only(series, &sma, &grid, config.initial_cash)?.trades;
            Ok(run_with_stops(series, &grid, &sma, config, shadow, None))
        }
        Mode::RMethod => {
            let artificial =
                generate_artificial_trades(series, &grid, &sma, config.rolling.horizon, DateTime::<Utc>::MAX_UTC)?;
            Ok(run_with_stops(series, &grid, &sma, config, artificial, Some(config.rolling.window)))
        }
    }
}

/// Trailing stops calibrated from the shadow Signal-Only trades.
pub fn run_t_method_calibrated(series: &BarSeries, config: &BacktestConfig) -> Result<BacktestResult> {
    run_backtest(series, &config.with_mode(Mode::TMethod))
}

/// Trailing stops calibrated from the trailing window of artificial trades.
pub fn run_r_method_calibrated(series: &BarSeries, config: &BacktestConfig) -> Result<BacktestResult> {
    run_backtest(series, &config.with_mode(Mode::RMethod))
}

/// One calibration over the whole series, as the T (`config.mode ==
/// TMethod`) or R method would see it at `as_of`: only trades that exited
/// strictly before it count. The warmup minimum is not applied.
pub fn calibrate_series(
    series: &BarSeries,
    config: &BacktestConfig,
    as_of: Option<DateTime<Utc>>,
) -> Result<ThresholdReport> {
    let (grid, sma) = prepare(series, config)?;
    let cutoff = as_of.unwrap_or(DateTime::<Utc>::MAX_UTC);
    let visible = |trades: Vec<TradeRecord>| -> Vec<TradeRecord> {
        trades
            .into_iter()
            .filter(|t| t.exit_time < cutoff)
            .filter(|t| config.include_forced_final_trade || !t.is_forced())
            .collect()
    };
    match config.mode {
        Mode::TMethod => {
            let corpus = visible(run_signal_only(series, &sma, &grid, config.initial_cash)?.trades);
            if corpus.is_empty() {
                return Err(Error::EmptyCorpus);
            }
            calibrate_threshold(&bin_trades(&corpus, config.n_policy.resolve(corpus.len()))?)
        }
        Mode::RMethod => {
            let all = generate_artificial_trades(series, &grid, &sma, config.rolling.horizon, DateTime::<Utc>::MAX_UTC)?;
            let corpus = visible(all);
            let n = config.n_policy.resolve(corpus.len().min(config.rolling.window));
            calibrate_r(&corpus, &config.rolling, n)
        }
        other => Err(Error::InvalidParameter(format!("mode `{other}` has no calibration"))),
    }
}

fn run_with_stops(
    series: &BarSeries,
    grid: &HourlyGrid,
    sma: &SmaSeries,
    config: &BacktestConfig,
    corpus: Vec<TradeRecord>,
    rolling_window: Option<usize>,
) -> BacktestResult {
    let mut stops = CalibratedStops {
        calibrator: Calibrator {
            corpus,
            config,
            rolling_window,
        },
        schedule: config.recalibration,
        active: None,
        last_calibrated: None,
        thresholds_used: Vec::new(),
        flags: ResultFlags::default(),
    };
    let out = simulate(series, grid, sma, config.initial_cash, &mut stops);
    let mut flags = stops.flags;
    flags.calibration_unavailable = stops.thresholds_used.is_empty();
    finish(series, config, out.trades, out.curve, stops.thresholds_used, flags)
}

fn run_buy_and_hold(series: &BarSeries, grid: &HourlyGrid, sma: &SmaSeries, config: &BacktestConfig) -> BacktestResult {
    let start = grid.points[sma.first_grid_index()];
    let last = series.len() - 1;
    let mut trades = Vec::new();
    let mut samples = Vec::with_capacity(series.len());
    if start.bar_index < last {
        let shares = config.initial_cash / start.price;
        for (j, bar) in series.bars().iter().enumerate() {
            let nlv = if j < start.bar_index {
                config.initial_cash
            } else {
                shares * bar.price
            };
            samples.push((bar.timestamp, nlv));
        }
        let prices: Vec<f64> = series.bars()[start.bar_index..].iter().map(|b| b.price).collect();
        trades.push(TradeRecord::close(
            start.timestamp,
            start.bar_index,
            start.price,
            series.timestamp(last),
            last,
            series.price(last),
            max_drawdown_of(&prices),
            TradeKind::Real,
            ExitReason::Forced,
        ));
    } else {
        samples.extend(series.bars().iter().map(|b| (b.timestamp, config.initial_cash)));
    }
    finish(
        series,
        config,
        trades,
        EquityCurve { samples },
        Vec::new(),
        ResultFlags::default(),
    )
}

fn finish(
    series: &BarSeries,
    config: &BacktestConfig,
    trades: Vec<TradeRecord>,
    curve: EquityCurve,
    thresholds_used: Vec<(DateTime<Utc>, f64)>,
    flags: ResultFlags,
) -> BacktestResult {
    let final_nlv = curve.final_nlv().unwrap_or(config.initial_cash);
    BacktestResult {
        asset_id: series.asset_id().to_string(),
        mode: config.mode,
        initial_cash: config.initial_cash,
        trades,
        curve,
        final_nlv,
        thresholds_used,
        flags,
    }
}
