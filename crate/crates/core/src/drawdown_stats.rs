//! Drawdown histogram and threshold selection.
//!
//! Trades are binned by maximum drawdown into `n` equal-width bins over
//! `[0, D_max]`. For each bin the conditional expected return is built from
//! the win and loss populations, weighted by the bin's probability and
//! accumulated from the tightest bin outwards. The stop threshold is the
//! upper edge of the bin where that running sum peaks.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{Outcome, TradeRecord};

/// The two per-trade quantities binning needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrawdownSample {
    pub drawdown: f64,
    pub trade_return: f64,
}

impl From<&TradeRecord> for DrawdownSample {
    fn from(t: &TradeRecord) -> Self {
        Self {
            drawdown: t.max_drawdown,
            trade_return: t.trade_return,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    pub count_win: usize,
    pub count_loss: usize,
    pub sum_return_win: f64,
    pub sum_return_loss: f64,
}

impl Bin {
    pub fn count_total(&self) -> usize {
        self.count_win + self.count_loss
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawdownBins {
    pub width: f64,
    pub max_drawdown: f64,
    pub corpus_size: usize,
    pub bins: Vec<Bin>,
}

impl DrawdownBins {
    pub fn n(&self) -> usize {
        self.bins.len()
    }

    pub fn upper_edges(&self) -> Vec<f64> {
        self.bins.iter().map(|b| b.upper).collect()
    }

    /// Bin index for a drawdown: half-open `[lower, upper)`, with the last
    /// bin closed so `D_max` lands in it.
    pub fn bin_index(&self, drawdown: f64) -> usize {
        bin_index(drawdown, self.width, self.bins.len())
    }

    /// Plot-ready histogram: `upper_edge,win_count,loss_count`.
    pub fn write_histogram_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "upper_edge,win_count,loss_count")?;
        for b in &self.bins {
            writeln!(out, "{},{},{}", b.upper, b.count_win, b.count_loss)?;
        }
        out.flush()
    }
}

fn lower_edge(i: usize, width: f64) -> f64 {
    i as f64 * width
}

fn upper_edge(i: usize, width: f64) -> f64 {
    (i + 1) as f64 * width
}

fn bin_index(drawdown: f64, width: f64, n: usize) -> usize {
    let mut idx = ((drawdown / width).floor().max(0.0) as usize).min(n - 1);
    // Division can round across an edge; settle against the edges the bins
    // actually report.
    while idx > 0 && drawdown < lower_edge(idx, width) {
        idx -= 1;
    }
    while idx + 1 < n && drawdown >= upper_edge(idx, width) {
        idx += 1;
    }
    idx
}

pub fn bin_trades(trades: &[TradeRecord], n: usize) -> Result<DrawdownBins> {
    let samples: Vec<DrawdownSample> = trades.iter().map(DrawdownSample::from).collect();
    bin_samples(&samples, n)
}

pub fn bin_samples(samples: &[DrawdownSample], n: usize) -> Result<DrawdownBins> {
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if n == 0 {
        return Err(Error::InvalidParameter("bin count must be at least 1".into()));
    }
    if let Some(bad) = samples
        .iter()
        .find(|s| !(s.drawdown >= 0.0) || !s.drawdown.is_finite() || !s.trade_return.is_finite())
    {
        return Err(Error::InvalidParameter(format!(
            "invalid sample: drawdown {}, return {}",
            bad.drawdown, bad.trade_return
        )));
    }
    let max_drawdown = samples.iter().map(|s| s.drawdown).fold(0.0, f64::max);
    if max_drawdown == 0.0 {
        return Err(Error::AllZeroDrawdowns);
    }

    let width = max_drawdown / n as f64;
    let mut bins: Vec<Bin> = (0..n)
        .map(|i| Bin {
            lower: lower_edge(i, width),
            upper: if i + 1 == n { max_drawdown } else { upper_edge(i, width) },
            ..Bin::default()
        })
        .collect();
    for s in samples {
        let bin = &mut bins[bin_index(s.drawdown, width, n)];
        match Outcome::from_return(s.trade_return) {
            Outcome::Win => {
                bin.count_win += 1;
                bin.sum_return_win += s.trade_return;
            }
            Outcome::Loss => {
                bin.count_loss += 1;
                bin.sum_return_loss += s.trade_return;
            }
        }
    }
    Ok(DrawdownBins {
        width,
        max_drawdown,
        corpus_size: samples.len(),
        bins,
    })
}

/// `E(r | D in B_i)` and `P(D in B_i)` for one bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinExpectation {
    pub expected_return: f64,
    pub probability: f64,
}

impl BinExpectation {
    pub fn weighted(&self) -> f64 {
        self.expected_return * self.probability
    }
}

/// Per-bin conditional expectation, combining losers and winners:
/// `E(r|L,B) P(L|B) + E(r|W,B) P(W|B)`. Empty bins contribute zero.
pub fn conditional_expectations(bins: &DrawdownBins) -> Vec<BinExpectation> {
    let corpus = bins.corpus_size as f64;
    bins.bins
        .iter()
        .map(|b| {
            let total = b.count_total();
            if total == 0 {
                return BinExpectation {
                    expected_return: 0.0,
                    probability: 0.0,
                };
            }
            let total_f = total as f64;
            let loss_term = if b.count_loss > 0 {
                (b.sum_return_loss / b.count_loss as f64) * (b.count_loss as f64 / total_f)
            } else {
                0.0
            };
            let win_term = if b.count_win > 0 {
                (b.sum_return_win / b.count_win as f64) * (b.count_win as f64 / total_f)
            } else {
                0.0
            };
            BinExpectation {
                expected_return: loss_term + win_term,
                probability: total_f / corpus,
            }
        })
        .collect()
}

/// Running sum of `e_i * p_i`.
pub fn cumulative_expectation(expectations: &[BinExpectation]) -> Vec<f64> {
    expectations
        .iter()
        .scan(0.0, |acc, e| {
            *acc += e.weighted();
            Some(*acc)
        })
        .collect()
}

/// Index of the maximum; ties go to the smallest index.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some(b) if v <= values[b] => {}
            _ => best = Some(i),
        }
    }
    best
}

/// The calibration outcome, with everything needed to plot the histogram
/// or audit the choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub n_bins: usize,
    pub width: f64,
    pub upper_edges: Vec<f64>,
    pub win_counts: Vec<usize>,
    pub loss_counts: Vec<usize>,
    pub e: Vec<f64>,
    pub p: Vec<f64>,
    pub v: Vec<f64>,
    /// Zero-based index of the chosen bin.
    pub k_star: usize,
    pub threshold: f64,
    pub corpus_size: usize,
    /// Every prefix of the running sum is negative; the stop is the
    /// least-bad choice and callers may prefer to leave stops off.
    pub expected_return_negative: bool,
    /// Set by the rolling calibrator when fewer than `m` trades were available.
    #[serde(default)]
    pub underfull: bool,
}

impl ThresholdReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Plot-ready histogram: `upper_edge,win_count,loss_count`.
    pub fn write_histogram_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "upper_edge,win_count,loss_count")?;
        for ((edge, w), l) in self.upper_edges.iter().zip(&self.win_counts).zip(&self.loss_counts) {
            writeln!(out, "{edge},{w},{l}")?;
        }
        out.flush()
    }
}

pub fn calibrate_threshold(bins: &DrawdownBins) -> Result<ThresholdReport> {
    if bins.bins.is_empty() || bins.corpus_size == 0 {
        return Err(Error::EmptyCorpus);
    }
    if bins.max_drawdown == 0.0 {
        return Err(Error::AllZeroDrawdowns);
    }
    let expectations = conditional_expectations(bins);
    let v = cumulative_expectation(&expectations);
    let k_star = argmax_first(&v).expect("non-empty");
    Ok(ThresholdReport {
        n_bins: bins.n(),
        width: bins.width,
        upper_edges: bins.upper_edges(),
        win_counts: bins.bins.iter().map(|b| b.count_win).collect(),
        loss_counts: bins.bins.iter().map(|b| b.count_loss).collect(),
        e: expectations.iter().map(|x| x.expected_return).collect(),
        p: expectations.iter().map(|x| x.probability).collect(),
        threshold: bins.bins[k_star].upper,
        expected_return_negative: v[k_star] < 0.0,
        v,
        k_star,
        corpus_size: bins.corpus_size,
        underfull: false,
    })
}

/// `ceil(sqrt(corpus_size))`, at least 1.
pub fn default_bin_count(corpus_size: usize) -> usize {
    let mut k = (corpus_size as f64).sqrt() as usize;
    while k * k < corpus_size {
        k += 1;
    }
    while k > 1 && (k - 1) * (k - 1) >= corpus_size {
        k -= 1;
    }
    k.max(1)
}
