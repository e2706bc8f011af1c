//! The 20-hour SMA Signal-Only strategy and per-trade drawdown measurement.
//!
//! Entries happen only at hourly grid points where the grid price is
//! strictly above the SMA computed at that point. While long, every minute
//! bar is compared against the last computed SMA value and the position is
//! closed at the first bar strictly below it. The comparison level only
//! moves at hourly points.

use std::io::Write;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::{format_timestamp, BarSeries, HourlyGrid};

pub const DEFAULT_SMA_PERIOD: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmaPoint {
    pub timestamp: DateTime<Utc>,
    pub value: f64,
}

/// SMA values aligned to grid points `period - 1 ..`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmaSeries {
    pub period: usize,
    pub points: Vec<SmaPoint>,
}

impl SmaSeries {
    /// SMA at a grid index, if defined there.
    pub fn at_grid(&self, grid_index: usize) -> Option<f64> {
        grid_index
            .checked_sub(self.period - 1)
            .and_then(|k| self.points.get(k))
            .map(|p| p.value)
    }

    /// Grid index of the first defined SMA value.
    pub fn first_grid_index(&self) -> usize {
        self.period - 1
    }
}

pub fn compute_sma(grid: &HourlyGrid, period: usize) -> Result<SmaSeries> {
    if period == 0 {
        return Err(Error::InvalidParameter("SMA period must be at least 1".into()));
    }
    if grid.len() < period {
        return Err(Error::InsufficientHistory {
            needed: period,
            available: grid.len(),
        });
    }
    // Each window is summed from scratch; period is small and this keeps
    // every value free of running-sum drift.
    let points = grid
        .points
        .windows(period)
        .map(|w| SmaPoint {
            timestamp: w[period - 1].timestamp,
            value: w.iter().map(|p| p.price).sum::<f64>() / period as f64,
        })
        .collect();
    Ok(SmaSeries { period, points })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    #[serde(rename = "W")]
    Win,
    #[serde(rename = "L")]
    Loss,
}

impl Outcome {
    /// A scratch trade (zero return) is a loss.
    pub fn from_return(trade_return: f64) -> Self {
        if trade_return > 0.0 {
            Outcome::Win
        } else {
            Outcome::Loss
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Outcome::Win => "W",
            Outcome::Loss => "L",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TradeKind {
    Real,
    Artificial,
}

impl TradeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TradeKind::Real => "real",
            TradeKind::Artificial => "artificial",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExitReason {
    Signal,
    Stop,
    /// Closed at the last bar of the series.
    Forced,
    /// Artificial trade reached its fixed horizon.
    Horizon,
}

/// One round-trip long trade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeRecord {
    pub entry_time: DateTime<Utc>,
    pub exit_time: DateTime<Utc>,
    pub entry_price: f64,
    pub exit_price: f64,
    pub max_drawdown: f64,
    pub trade_return: f64,
    pub outcome: Outcome,
    pub kind: TradeKind,
    pub exit_reason: ExitReason,
    /// Minute bar supplying the entry price.
    pub entry_bar: usize,
    pub exit_bar: usize,
}

impl TradeRecord {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn close(
        entry_time: DateTime<Utc>,
        entry_bar: usize,
        entry_price: f64,
        exit_time: DateTime<Utc>,
        exit_bar: usize,
        exit_price: f64,
        max_drawdown: f64,
        kind: TradeKind,
        exit_reason: ExitReason,
    ) -> Self {
        let trade_return = exit_price / entry_price - 1.0;
        Self {
            entry_time,
            exit_time,
            entry_price,
            exit_price,
            max_drawdown,
            trade_return,
            outcome: Outcome::from_return(trade_return),
            kind,
            exit_reason,
            entry_bar,
            exit_bar,
        }
    }

    pub fn is_forced(&self) -> bool {
        self.exit_reason == ExitReason::Forced
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EquityCurve {
    pub samples: Vec<(DateTime<Utc>, f64)>,
}

impl EquityCurve {
    pub fn final_nlv(&self) -> Option<f64> {
        self.samples.last().map(|s| s.1)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "timestamp,nlv")?;
        for (ts, nlv) in &self.samples {
            writeln!(out, "{},{}", format_timestamp(ts), nlv)?;
        }
        out.flush()
    }
}

pub const TRADES_CSV_HEADER: &str =
    "entry_time,exit_time,entry_price,exit_price,return,max_drawdown,outcome,kind";

pub fn write_trades_csv<W: Write>(trades: &[TradeRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{TRADES_CSV_HEADER}")?;
    for t in trades {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            format_timestamp(&t.entry_time),
            format_timestamp(&t.exit_time),
            t.entry_price,
            t.exit_price,
            t.trade_return,
            t.max_drawdown,
            t.outcome.as_str(),
            t.kind.as_str()
        )?;
    }
    out.flush()
}

/// Maximum fractional decline from the running peak over `prices`.
pub fn max_drawdown_of(prices: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut worst = 0.0_f64;
    for &p in prices {
        if p > peak {
            peak = p;
        }
        let dd = (peak - p) / peak;
        if dd > worst {
            worst = dd;
        }
    }
    worst
}

/// Maximum drawdown of the price path over `[from, to]`.
///
/// The path is the step function of the bars, so the window starts at the
/// latest bar at or before `from` and ends at the latest bar at or before
/// `to`.
pub fn measure_max_drawdown(series: &BarSeries, from: DateTime<Utc>, to: DateTime<Utc>) -> Result<f64> {
    if from >= to {
        return Err(Error::EmptyWindow { from, to });
    }
    let start = series
        .index_at_or_before(from)
        .ok_or(Error::EmptyWindow { from, to })?;
    let end = series
        .index_at_or_before(to)
        .ok_or(Error::EmptyWindow { from, to })?;
    let prices: Vec<f64> = series.bars()[start..=end].iter().map(|b| b.price).collect();
    Ok(max_drawdown_of(&prices))
}

/// Hooks a trailing-stop controller into the strategy state machine.
pub trait StopPolicy {
    /// Called at each hourly grid point, after the SMA has been refreshed.
    fn on_grid(&mut self, _grid_index: usize, _at: DateTime<Utc>) {}
    /// Called immediately before a long entry at grid time `at`.
    fn on_entry(&mut self, _at: DateTime<Utc>) {}
    /// Currently armed threshold `T`; exit when price <= (1 - T) * running max.
    fn threshold(&self) -> Option<f64>;
}

pub struct NoStop;

impl StopPolicy for NoStop {
    fn threshold(&self) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOutput {
    pub trades: Vec<TradeRecord>,
    pub curve: EquityCurve,
}

struct OpenPosition {
    entry_time: DateTime<Utc>,
    entry_bar: usize,
    entry_price: f64,
    shares: f64,
    running_max: f64,
    max_drawdown: f64,
}

/// The long-only state machine shared by every strategy mode.
pub(crate) fn simulate(
    series: &BarSeries,
    grid: &HourlyGrid,
    sma: &SmaSeries,
    initial_cash: f64,
    stops: &mut dyn StopPolicy,
) -> SimulationOutput {
    let n = series.len();
    let mut grid_at_bar: Vec<Option<usize>> = vec![None; n];
    for (gi, p) in grid.points.iter().enumerate() {
        grid_at_bar[p.bar_index] = Some(gi);
    }

    let mut cash = initial_cash;
    let mut position: Option<OpenPosition> = None;
    let mut sma_level: Option<f64> = None;
    let mut trades = Vec::new();
    let mut samples = Vec::with_capacity(n);

    for j in 0..n {
        let bar = series.bars()[j];
        let point = grid_at_bar[j].map(|g| (g, grid.points[g]));
        // A grid point whose boundary coincides with this bar is computed
        // before the bar is checked; one in a data gap takes effect after.
        let on_boundary = matches!(point, Some((_, p)) if p.timestamp == bar.timestamp);
        if let (true, Some((g, p))) = (on_boundary, point) {
            sma_level = sma.at_grid(g).or(sma_level);
            stops.on_grid(g, p.timestamp);
        }

        if let Some(pos) = position.as_mut() {
            if bar.price > pos.running_max {
                pos.running_max = bar.price;
            }
            let dd = (pos.running_max - bar.price) / pos.running_max;
            if dd > pos.max_drawdown {
                pos.max_drawdown = dd;
            }
            let stop_hit = stops
                .threshold()
                .is_some_and(|t| bar.price <= (1.0 - t) * pos.running_max);
            let signal_hit = sma_level.is_some_and(|s| bar.price < s);
            if stop_hit || signal_hit {
                let reason = if stop_hit { ExitReason::Stop } else { ExitReason::Signal };
                cash = pos.shares * bar.price;
                trades.push(TradeRecord::close(
                    pos.entry_time,
                    pos.entry_bar,
                    pos.entry_price,
                    bar.timestamp,
                    j,
                    bar.price,
                    pos.max_drawdown,
                    TradeKind::Real,
                    reason,
                ));
                position = None;
            }
        }

        if let Some((g, p)) = point {
            if !on_boundary {
                sma_level = sma.at_grid(g).or(sma_level);
                stops.on_grid(g, p.timestamp);
            }
            let can_enter = position.is_none() && j + 1 < n;
            if let (true, Some(level)) = (can_enter, sma.at_grid(g)) {
                if p.price > level {
                    stops.on_entry(p.timestamp);
                    position = Some(OpenPosition {
                        entry_time: p.timestamp,
                        entry_bar: j,
                        entry_price: p.price,
                        shares: cash / p.price,
                        running_max: p.price,
                        max_drawdown: 0.0,
                    });
                    cash = 0.0;
                }
            }
        }

        let nlv = match &position {
            Some(pos) => pos.shares * bar.price,
            None => cash,
        };
        samples.push((bar.timestamp, nlv));
    }

    if let Some(pos) = position.take() {
        let j = n - 1;
        let bar = series.bars()[j];
        trades.push(TradeRecord::close(
            pos.entry_time,
            pos.entry_bar,
            pos.entry_price,
            bar.timestamp,
            j,
            bar.price,
            pos.max_drawdown,
            TradeKind::Real,
            ExitReason::Forced,
        ));
    }

    SimulationOutput {
        trades,
        curve: EquityCurve { samples },
    }
}

/// Runs the stopless baseline strategy over the whole series.
pub fn run_signal_only(
    series: &BarSeries,
    sma: &SmaSeries,
    grid: &HourlyGrid,
    initial_cash: f64,
) -> Result<SimulationOutput> {
    if grid.len() < sma.period {
        return Err(Error::InsufficientHistory {
            needed: sma.period,
            available: grid.len(),
        });
    }
    Ok(simulate(series, grid, sma, initial_cash, &mut NoStop))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::{generate_gbm, to_hourly_grid, PriceBar, SYNTH_START};
    use chrono::Duration;
    use proptest::prelude::*;

    fn series_from(prices: &[f64]) -> BarSeries {
        let bars = prices
            .iter()
            .enumerate()
            .map(|(i, &p)| PriceBar::new(SYNTH_START + Duration::minutes(i as i64), p))
            .collect();
        BarSeries::new("T", bars).unwrap()
    }

    fn grid_of(prices: &[f64]) -> HourlyGrid {
        let bars: Vec<_> = prices
            .iter()
            .enumerate()
            .map(|(i, &p)| PriceBar::new(SYNTH_START + Duration::hours(i as i64), p))
            .collect();
        to_hourly_grid(&BarSeries::new("G", bars).unwrap())
    }

    #[test]
    fn sma_constant_and_arithmetic() {
        let sma = compute_sma(&grid_of(&[100.0; 20]), 20).unwrap();
        assert_eq!(sma.points.len(), 1);
        assert_eq!(sma.points[0].value, 100.0);

        let prices: Vec<f64> = (1..=21).map(|x| x as f64).collect();
        let sma = compute_sma(&grid_of(&prices), 20).unwrap();
        assert_eq!(sma.at_grid(19), Some(10.5));
        assert_eq!(sma.at_grid(20), Some(11.5));
        assert_eq!(sma.at_grid(18), None);
    }

    #[test]
    fn sma_needs_history() {
        assert!(matches!(
            compute_sma(&grid_of(&[1.0; 5]), 20),
            Err(Error::InsufficientHistory { needed: 20, available: 5 })
        ));
    }

    #[test]
    fn sma_matches_naive_recompute() {
        let s = generate_gbm(11, 50.0, 0.1, 0.4, 500 * 60).unwrap();
        let grid = to_hourly_grid(&s);
        assert_eq!(grid.len(), 501);
        let sma = compute_sma(&grid, 20).unwrap();
        let prices: Vec<f64> = grid.prices().collect();
        for k in 19..prices.len() {
            let mut acc = 0.0;
            for p in &prices[k + 1 - 20..=k] {
                acc += p;
            }
            assert_eq!(sma.at_grid(k).unwrap(), acc / 20.0);
        }
    }

    #[test]
    fn drawdown_single_peak() {
        let s = series_from(&[100.0, 110.0, 99.0]);
        let dd = measure_max_drawdown(&s, s.timestamp(0), s.timestamp(2)).unwrap();
        assert!((dd - 0.1).abs() < 1e-15);
        let s = series_from(&[1.0, 2.0, 2.0, 3.0]);
        assert_eq!(measure_max_drawdown(&s, s.timestamp(0), s.timestamp(3)).unwrap(), 0.0);
        assert!(matches!(
            measure_max_drawdown(&s, s.timestamp(2), s.timestamp(2)),
            Err(Error::EmptyWindow { .. })
        ));
    }

    #[test]
    fn rising_series_single_forced_winner() {
        let prices: Vec<f64> = (0..30 * 60).map(|i| 100.0 + i as f64 * 0.01).collect();
        let s = series_from(&prices);
        let grid = to_hourly_grid(&s);
        let sma = compute_sma(&grid, 20).unwrap();
        let out = run_signal_only(&s, &sma, &grid, 100_000.0).unwrap();
        assert_eq!(out.trades.len(), 1);
        let t = &out.trades[0];
        assert_eq!(t.entry_time, grid.points[19].timestamp);
        assert_eq!(t.exit_reason, ExitReason::Forced);
        assert_eq!(t.max_drawdown, 0.0);
        assert_eq!(t.outcome, Outcome::Win);
    }

    #[test]
    fn exit_at_first_minute_below_sma() {
        // 25 rising hours, then a single-minute drop below the SMA.
        let mut prices: Vec<f64> = (0..25 * 60).map(|i| 100.0 + i as f64 * 0.01).collect();
        let drop_at = prices.len() + 7;
        prices.extend(std::iter::repeat(prices[prices.len() - 1]).take(7));
        prices.push(50.0);
        prices.extend(std::iter::repeat(50.0).take(100));
        let s = series_from(&prices);
        let grid = to_hourly_grid(&s);
        let sma = compute_sma(&grid, 20).unwrap();
        let out = run_signal_only(&s, &sma, &grid, 100_000.0).unwrap();
        assert_eq!(out.trades.len(), 1);
        let t = &out.trades[0];
        assert_eq!(t.exit_time, s.timestamp(drop_at));
        assert_eq!(t.exit_price, 50.0);
        assert_eq!(t.exit_reason, ExitReason::Signal);
        assert_eq!(t.outcome, Outcome::Loss);
    }

    #[test]
    fn scratch_trade_is_a_loss() {
        assert_eq!(Outcome::from_return(0.0), Outcome::Loss);
    }

    #[test]
    fn gbm_trades_invariants() {
        let s = generate_gbm(42, 100.0, 0.05, 0.25, 30 * 390).unwrap();
        let grid = to_hourly_grid(&s);
        let sma = compute_sma(&grid, 20).unwrap();
        let out = run_signal_only(&s, &sma, &grid, 100_000.0).unwrap();
        assert!(out.trades.len() > 5);
        let grid_times: std::collections::HashSet<_> = grid.points.iter().map(|p| p.timestamp).collect();
        let mut growth = 100_000.0;
        for w in out.trades.windows(2) {
            assert!(w[0].exit_time <= w[1].entry_time);
        }
        for t in &out.trades {
            assert!(t.exit_time > t.entry_time);
            assert!(grid_times.contains(&t.entry_time));
            let dd = measure_max_drawdown(&s, t.entry_time, t.exit_time).unwrap();
            assert_eq!(dd, t.max_drawdown);
            growth *= 1.0 + t.trade_return;
        }
        let final_nlv = out.curve.final_nlv().unwrap();
        assert!(((final_nlv - growth) / growth).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn drawdown_matches_quadratic_scan(prices in prop::collection::vec(1.0f64..200.0, 2..120)) {
            let mut brute = 0.0_f64;
            for i in 0..prices.len() {
                for j in i..prices.len() {
                    brute = brute.max((prices[i] - prices[j]) / prices[i]);
                }
            }
            let s = series_from(&prices);
            let dd = measure_max_drawdown(&s, s.timestamp(0), s.last_timestamp()).unwrap();
            prop_assert!((dd - brute).abs() <= 1e-12);
        }
    }
}
