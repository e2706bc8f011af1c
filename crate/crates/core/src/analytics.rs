//! Cross-asset comparison metrics: final-NLV changes against the
//! Signal-Only baseline, their aggregates, and the trade-count correlation.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

/// `(nlv_variant - nlv_signal) / nlv_signal`.
pub fn delta_nlv(nlv_variant: f64, nlv_signal: f64) -> Result<f64> {
    if !(nlv_signal > 0.0) {
        return Err(Error::NonPositiveBaseline(nlv_signal));
    }
    Ok((nlv_variant - nlv_signal) / nlv_signal)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Column {
    #[serde(rename = "TS")]
    Ts,
    #[serde(rename = "RS")]
    Rs,
}

impl fmt::Display for Column {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Column::Ts => "TS",
            Column::Rs => "RS",
        })
    }
}

impl FromStr for Column {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "TS" | "T" => Ok(Column::Ts),
            "RS" | "R" => Ok(Column::Rs),
            other => Err(Error::InvalidParameter(format!("unknown column `{other}`"))),
        }
    }
}

/// One row of the comparison table. A delta is absent when the run that
/// would produce it was not requested or failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetComparison {
    pub asset_id: String,
    pub delta_nlv_ts: Option<f64>,
    pub delta_nlv_rs: Option<f64>,
    pub signal_only_trades: usize,
}

impl AssetComparison {
    pub fn delta(&self, column: Column) -> Option<f64> {
        match column {
            Column::Ts => self.delta_nlv_ts,
            Column::Rs => self.delta_nlv_rs,
        }
    }
}

pub const COMPARISON_CSV_HEADER: &str = "asset,delta_nlv_ts,delta_nlv_rs,trades";

fn format_delta(d: Option<f64>) -> String {
    d.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Writes the table with six decimal places, the precision of the
/// published comparison tables.
pub fn write_comparison_csv<W: Write>(rows: &[AssetComparison], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{COMPARISON_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{}",
            r.asset_id,
            format_delta(r.delta_nlv_ts),
            format_delta(r.delta_nlv_rs),
            r.signal_only_trades
        )?;
    }
    out.flush()
}

pub fn read_comparison_csv<R: Read>(input: R) -> Result<Vec<AssetComparison>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = reader.headers()?.clone();
    let expected: Vec<&str> = COMPARISON_CSV_HEADER.split(',').collect();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::MalformedRow {
            line: 1,
            reason: format!("expected header `{COMPARISON_CSV_HEADER}`"),
        });
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let bad = |what: &str, value: &str| Error::MalformedRow {
            line,
            reason: format!("bad {what} `{value}`"),
        };
        if record.len() != 4 {
            return Err(Error::MalformedRow {
                line,
                reason: format!("expected 4 fields, found {}", record.len()),
            });
        }
        let delta = |i: usize, what: &str| -> Result<Option<f64>> {
            let raw = &record[i];
            if raw.is_empty() {
                return Ok(None);
            }
            raw.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .map(Some)
                .ok_or_else(|| bad(what, raw))
        };
        rows.push(AssetComparison {
            asset_id: record[0].to_string(),
            delta_nlv_ts: delta(1, "delta_nlv_ts")?,
            delta_nlv_rs: delta(2, "delta_nlv_rs")?,
            signal_only_trades: record[3].parse().map_err(|_| bad("trades", &record[3]))?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateSummary {
    pub n_assets: usize,
    pub win_fraction: f64,
    pub mean_gain_winners: f64,
    pub mean_loss_losers: f64,
    pub expected_change: f64,
}

/// Aggregates one column of deltas. A delta of exactly zero is a loss.
pub fn aggregate_deltas(deltas: &[f64]) -> Result<AggregateSummary> {
    if deltas.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (wins, losses): (Vec<f64>, Vec<f64>) = deltas.iter().partition(|d| **d > 0.0);
    let mean = |xs: &[f64]| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    let n = deltas.len();
    let win_fraction = wins.len() as f64 / n as f64;
    let mean_gain_winners = mean(&wins);
    let mean_loss_losers = mean(&losses);
    Ok(AggregateSummary {
        n_assets: n,
        win_fraction,
        mean_gain_winners,
        mean_loss_losers,
        expected_change: win_fraction * mean_gain_winners + (1.0 - win_fraction) * mean_loss_losers,
    })
}

/// Aggregates a column over the rows where it is present.
pub fn aggregate(comparisons: &[AssetComparison], column: Column) -> Result<AggregateSummary> {
    let deltas: Vec<f64> = comparisons.iter().filter_map(|c| c.delta(column)).collect();
    aggregate_deltas(&deltas)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub rho: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Sample Pearson correlation with a two-sided p-value from the Student t
/// distribution on `n - 2` degrees of freedom.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<CorrelationResult> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::TooFewSamples(n));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let rho = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    Ok(CorrelationResult {
        rho,
        p_value: t_test_p_value(rho, n),
        n,
    })
}

/// Two-sided p-value of `t = r sqrt((n-2)/(1-r^2))`. The t tail is the
/// regularized incomplete beta `I_{v/(v+t^2)}(v/2, 1/2)`, written here in
/// terms of `r` so that `|r| = 1` needs no special case.
fn t_test_p_value(rho: f64, n: usize) -> f64 {
    let dof = (n - 2) as f64;
    let one_minus_r2 = (1.0 - rho * rho).max(0.0);
    if one_minus_r2 == 0.0 {
        return 0.0;
    }
    // v / (v + t^2) with t^2 = r^2 v / (1 - r^2) simplifies to 1 - r^2.
    beta_reg(dof / 2.0, 0.5, one_minus_r2).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorAnalysis {
    pub column: Column,
    pub correlation: CorrelationResult,
    /// `(signal_only_trades, delta)` pairs.
    pub scatter: Vec<(usize, f64)>,
}

impl ErrorAnalysis {
    pub fn write_scatter_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        write_scatter_csv(&self.scatter, out)
    }
}

pub fn write_scatter_csv<W: Write>(scatter: &[(usize, f64)], mut out: W) -> std::io::Result<()> {
    writeln!(out, "trades,delta_nlv")?;
    for (trades, delta) in scatter {
        writeln!(out, "{trades},{delta:.6}")?;
    }
    out.flush()
}

pub fn scatter(comparisons: &[AssetComparison], column: Column) -> Vec<(usize, f64)> {
    comparisons
        .iter()
        .filter_map(|c| c.delta(column).map(|d| (c.signal_only_trades, d)))
        .collect()
}

/// Correlates Signal-Only trade counts with the chosen delta column.
pub fn error_analysis(comparisons: &[AssetComparison], column: Column) -> Result<ErrorAnalysis> {
    let scatter = scatter(comparisons, column);
    let trades: Vec<f64> = scatter.iter().map(|(t, _)| *t as f64).collect();
    let deltas: Vec<f64> = scatter.iter().map(|(_, d)| *d).collect();
    let correlation = pearson(&trades, &deltas)?;
    Ok(ErrorAnalysis {
        column,
        correlation,
        scatter,
    })
}
