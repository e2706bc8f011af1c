//! Rolling-window calibration from artificial fixed-horizon trades.
//!
//! Every hourly point where the entry signal fires opens an artificial
//! long that is closed exactly `l` grid points later, ignoring exit
//! signals and stops. The trailing `m` of these (by exit time) form the
//! calibration corpus, which then goes through the same binning and
//! threshold selection as the Signal-Only corpus.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::drawdown_stats::{bin_trades, calibrate_threshold, ThresholdReport};
use crate::error::{Error, Result};
use crate::market_data::{BarSeries, HourlyGrid};
use crate::signal::{max_drawdown_of, ExitReason, SmaSeries, TradeKind, TradeRecord};

pub const DEFAULT_HORIZON: usize = 20;
pub const DEFAULT_WINDOW: usize = 250;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RollingParams {
    /// Holding horizon `l`, in hourly grid points.
    pub horizon: usize,
    /// Trailing window size `m`, in trades.
    pub window: usize,
}

impl Default for RollingParams {
    fn default() -> Self {
        Self {
            horizon: DEFAULT_HORIZON,
            window: DEFAULT_WINDOW,
        }
    }
}

impl RollingParams {
    pub fn new(horizon: usize, window: usize) -> Result<Self> {
        if horizon == 0 || window == 0 {
            return Err(Error::InvalidParameter(format!(
                "horizon and window must be at least 1, got l={horizon} m={window}"
            )));
        }
        Ok(Self { horizon, window })
    }
}

/// All artificial trades whose exit is at or before `as_of`, in entry order.
///
/// Drawdowns are measured at minute resolution over the bars from the entry
/// grid point's bar through the exit grid point's bar.
pub fn generate_artificial_trades(
    series: &BarSeries,
    grid: &HourlyGrid,
    sma: &SmaSeries,
    horizon: usize,
    as_of: DateTime<Utc>,
) -> Result<Vec<TradeRecord>> {
    if horizon == 0 {
        return Err(Error::InvalidParameter("horizon must be at least 1".into()));
    }
    if grid.len() < sma.period {
        return Err(Error::InsufficientHistory {
            needed: sma.period,
            available: grid.len(),
        });
    }
    let mut trades = Vec::new();
    for g in sma.first_grid_index()..grid.len().saturating_sub(horizon) {
        let entry = grid.points[g];
        let exit = grid.points[g + horizon];
        if exit.timestamp > as_of {
            break;
        }
        let Some(level) = sma.at_grid(g) else { continue };
        if entry.price <= level {
            continue;
        }
        let prices: Vec<f64> = series.bars()[entry.bar_index..=exit.bar_index]
            .iter()
            .map(|b| b.price)
            .collect();
        trades.push(TradeRecord::close(
            entry.timestamp,
            entry.bar_index,
            entry.price,
            exit.timestamp,
            exit.bar_index,
            exit.price,
            max_drawdown_of(&prices),
            TradeKind::Artificial,
            ExitReason::Horizon,
        ));
    }
    Ok(trades)
}

/// The most recent `window` trades by exit time, ties broken by entry time.
pub fn recent_window(trades: &[TradeRecord], window: usize) -> Vec<TradeRecord> {
    let mut sorted: Vec<&TradeRecord> = trades.iter().collect();
    sorted.sort_by_key(|t| (t.exit_time, t.entry_time));
    let start = sorted.len().saturating_sub(window);
    sorted[start..].iter().map(|t| (*t).clone()).collect()
}

/// Calibrates on the trailing `m` artificial trades with `n` bins.
pub fn calibrate_r(artificial: &[TradeRecord], params: &RollingParams, n: usize) -> Result<ThresholdReport> {
    if artificial.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let corpus = recent_window(artificial, params.window);
    let mut report = calibrate_threshold(&bin_trades(&corpus, n)?)?;
    report.underfull = artificial.len() < params.window;
    Ok(report)
}
