//! Minute-resolution price series: loading, validation, hourly resampling
//! and synthetic generation.
//!
//! A [`BarSeries`] carries one price per minute bar. Timestamps are UTC,
//! minute-aligned and strictly increasing; gaps (market closures) are
//! allowed. Everything downstream treats the series as a step function:
//! the price in effect at time `t` is the latest bar at or before `t`.

mod grid;
mod synth;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Timelike, Utc};

use crate::error::{Error, Result};

pub use grid::{to_hourly_grid, GridPoint, HourlyGrid};
pub use synth::{generate_gbm, generate_planted, PlantedSeries, PlantedSpec, SYNTH_START};

/// Minutes in the conventional equity trading day used for GBM scaling.
pub const MINUTES_PER_DAY: f64 = 390.0;
/// Trading days per year used for GBM scaling.
pub const TRADING_DAYS: f64 = 252.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriceBar {
    pub timestamp: DateTime<Utc>,
    pub price: f64,
}

impl PriceBar {
    pub fn new(timestamp: DateTime<Utc>, price: f64) -> Self {
        Self { timestamp, price }
    }
}

pub(crate) fn is_minute_aligned(ts: &DateTime<Utc>) -> bool {
    ts.second() == 0 && ts.nanosecond() == 0
}

pub(crate) fn format_timestamp(ts: &DateTime<Utc>) -> String {
    ts.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

/// An immutable, validated minute-bar price path for one asset.
#[derive(Debug, Clone, PartialEq)]
pub struct BarSeries {
    asset_id: String,
    bars: Vec<PriceBar>,
}

impl BarSeries {
    /// Validates the bars. They must already be in timestamp order.
    pub fn new(asset_id: impl Into<String>, bars: Vec<PriceBar>) -> Result<Self> {
        if bars.is_empty() {
            return Err(Error::InvalidParameter("bar series is empty".into()));
        }
        for (i, bar) in bars.iter().enumerate() {
            if !(bar.price > 0.0) || !bar.price.is_finite() {
                return Err(Error::NonPositivePrice {
                    line: i + 1,
                    price: bar.price,
                });
            }
            if !is_minute_aligned(&bar.timestamp) {
                return Err(Error::MisalignedTimestamp {
                    line: i + 1,
                    timestamp: bar.timestamp.to_rfc3339(),
                });
            }
        }
        for pair in bars.windows(2) {
            if pair[1].timestamp == pair[0].timestamp {
                return Err(Error::DuplicateTimestamp(pair[1].timestamp));
            }
            if pair[1].timestamp < pair[0].timestamp {
                return Err(Error::InvalidParameter(format!(
                    "bars out of order at {}",
                    pair[1].timestamp
                )));
            }
        }
        Ok(Self {
            asset_id: asset_id.into(),
            bars,
        })
    }

    pub fn asset_id(&self) -> &str {
        &self.asset_id
    }

    pub fn bars(&self) -> &[PriceBar] {
        &self.bars
    }

    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }

    pub fn price(&self, index: usize) -> f64 {
        self.bars[index].price
    }

    pub fn timestamp(&self, index: usize) -> DateTime<Utc> {
        self.bars[index].timestamp
    }

    pub fn first_timestamp(&self) -> DateTime<Utc> {
        self.bars[0].timestamp
    }

    pub fn last_timestamp(&self) -> DateTime<Utc> {
        self.bars[self.bars.len() - 1].timestamp
    }

    /// Index of the latest bar at or before `ts`.
    pub fn index_at_or_before(&self, ts: DateTime<Utc>) -> Option<usize> {
        let after = self.bars.partition_point(|b| b.timestamp <= ts);
        after.checked_sub(1)
    }

    /// The series restricted to bars strictly before `ts`, if any remain.
    pub fn truncated_before(&self, ts: DateTime<Utc>) -> Option<BarSeries> {
        let end = self.bars.partition_point(|b| b.timestamp < ts);
        (end > 0).then(|| BarSeries {
            asset_id: self.asset_id.clone(),
            bars: self.bars[..end].to_vec(),
        })
    }

    pub fn with_asset_id(mut self, asset_id: impl Into<String>) -> Self {
        self.asset_id = asset_id.into();
        self
    }
}

/// Reads a `timestamp,price` CSV. Rows may appear in any order; they are
/// sorted before validation.
pub fn load_csv(path: impl AsRef<Path>, asset_id: &str) -> Result<BarSeries> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let headers = reader.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "timestamp" || &headers[1] != "price" {
        return Err(Error::MalformedRow {
            line: 1,
            reason: format!("expected header `timestamp,price`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }

    let mut bars = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != 2 {
            return Err(Error::MalformedRow {
                line,
                reason: format!("expected 2 fields, found {}", record.len()),
            });
        }
        let timestamp = DateTime::parse_from_rfc3339(&record[0])
            .map_err(|e| Error::MalformedRow {
                line,
                reason: format!("bad timestamp `{}`: {e}", &record[0]),
            })?
            .with_timezone(&Utc);
        if !is_minute_aligned(&timestamp) {
            return Err(Error::MisalignedTimestamp {
                line,
                timestamp: record[0].to_string(),
            });
        }
        let price: f64 = record[1].parse().map_err(|_| Error::MalformedRow {
            line,
            reason: format!("bad price `{}`", &record[1]),
        })?;
        if !(price > 0.0) || !price.is_finite() {
            return Err(Error::NonPositivePrice { line, price });
        }
        bars.push(PriceBar { timestamp, price });
    }

    if bars.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    bars.sort_by_key(|b| b.timestamp);
    if let Some(pair) = bars.windows(2).find(|w| w[0].timestamp == w[1].timestamp) {
        return Err(Error::DuplicateTimestamp(pair[0].timestamp));
    }
    BarSeries::new(asset_id, bars)
}

pub fn write_csv<W: Write>(series: &BarSeries, mut out: W) -> std::io::Result<()> {
    writeln!(out, "timestamp,price")?;
    for bar in series.bars() {
        writeln!(out, "{},{}", format_timestamp(&bar.timestamp), bar.price)?;
    }
    out.flush()
}

/// Writes the series in the same schema [`load_csv`] reads. Prices use the
/// shortest round-trip float representation, so a reload is bit-identical.
pub fn save_csv(series: &BarSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(series, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}
