//! Trailing stop-loss calibration from the empirical distribution of
//! per-trade maximum drawdowns.
//!
//! The pipeline: minute bars ([`market_data`]) feed a 20-hour SMA
//! Signal-Only strategy ([`signal`]) whose round-trip trades are binned by
//! drawdown ([`drawdown_stats`]) to pick the threshold that maximizes the
//! cumulative conditional expected return. [`rolling`] builds the same
//! calibration from overlapping fixed-horizon artificial trades, and
//! [`backtest`] replays the strategy with the calibrated trailing stops.
//! [`analytics`] compares final NLVs across assets and [`cli`] drives batch
//! runs.

pub mod analytics;
pub mod backtest;
pub mod cli;
pub mod drawdown_stats;
pub mod error;
pub mod market_data;
pub mod rolling;
pub mod signal;

pub use error::{Error, Result};
