//! Independent reference implementations used as test oracles. Nothing here
//! calls into the library's strategy, binning or calibration code; only the
//! data types and generators are shared.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Utc};
use stopcal::market_data::BarSeries;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefPoint {
    pub boundary: DateTime<Utc>,
    pub price: f64,
    pub bar: usize,
}

/// Hourly points by brute force: each bar belongs to the first whole hour at
/// or after it, and the last bar of each group sets the price.
pub fn ref_grid(bars: &[(DateTime<Utc>, f64)]) -> Vec<RefPoint> {
    let mut out: Vec<RefPoint> = Vec::new();
    for (i, &(t, p)) in bars.iter().enumerate() {
        let secs = t.timestamp();
        let boundary = DateTime::from_timestamp((secs + 3599).div_euclid(3600) * 3600, 0).unwrap();
        match out.last_mut() {
            Some(last) if last.boundary == boundary => {
                last.price = p;
                last.bar = i;
            }
            _ => out.push(RefPoint { boundary, price: p, bar: i }),
        }
    }
    out
}

pub fn ref_sma(grid: &[RefPoint], period: usize) -> Vec<Option<f64>> {
    (0..grid.len())
        .map(|g| {
            if g + 1 < period {
                return None;
            }
            let mut sum = 0.0;
            for point in &grid[g + 1 - period..=g] {
                sum += point.price;
            }
            Some(sum / period as f64)
        })
        .collect()
}

pub fn bars_of(series: &BarSeries) -> Vec<(DateTime<Utc>, f64)> {
    series.bars().iter().map(|b| (b.timestamp, b.price)).collect()
}

/// Largest `(p_a - p_b) / p_a` over `a <= b`, by exhaustive pairs.
pub fn brute_drawdown(prices: &[f64]) -> f64 {
    let mut worst = 0.0_f64;
    for b in 0..prices.len() {
        for a in 0..=b {
            let d = (prices[a] - prices[b]) / prices[a];
            if d > worst {
                worst = d;
            }
        }
    }
    worst
}

fn peak_drawdown(prices: &[f64]) -> f64 {
    let mut peak = prices[0];
    let mut worst = 0.0_f64;
    for &p in prices {
        peak = peak.max(p);
        worst = worst.max((peak - p) / peak);
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefExit {
    Signal,
    Stop,
    Forced,
    Horizon,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefTrade {
    pub entry_time: DateTime<Utc>,
    pub exit_time: DateTime<Utc>,
    pub entry_bar: usize,
    pub exit_bar: usize,
    pub entry_price: f64,
    pub exit_price: f64,
    pub drawdown: f64,
    pub ret: f64,
    pub exit: RefExit,
}

impl RefTrade {
    fn new(
        entry: (DateTime<Utc>, usize, f64),
        exit: (DateTime<Utc>, usize, f64),
        bars: &[(DateTime<Utc>, f64)],
        how: RefExit,
    ) -> Self {
        let prices: Vec<f64> = bars[entry.1..=exit.1].iter().map(|b| b.1).collect();
        RefTrade {
            entry_time: entry.0,
            exit_time: exit.0,
            entry_bar: entry.1,
            exit_bar: exit.1,
            entry_price: entry.2,
            exit_price: exit.2,
            drawdown: peak_drawdown(&prices),
            ret: exit.2 / entry.2 - 1.0,
            exit: how,
        }
    }
}

pub struct RefRun {
    pub trades: Vec<RefTrade>,
    pub final_nlv: f64,
}

/// Minute-by-minute replay of the long-only SMA strategy. `calibrate` is
/// asked for a threshold at every entry; `None` keeps the previous one.
pub fn ref_simulate(
    bars: &[(DateTime<Utc>, f64)],
    period: usize,
    cash: f64,
    calibrate: &mut dyn FnMut(DateTime<Utc>) -> Option<f64>,
) -> RefRun {
    let grid = ref_grid(bars);
    let sma = ref_sma(&grid, period);
    let sourced: BTreeMap<usize, usize> = grid.iter().enumerate().map(|(g, p)| (p.bar, g)).collect();
    let n = bars.len();

    let mut level: Option<f64> = None;
    let mut stop: Option<f64> = None;
    // (entry time, entry bar, entry price, running max)
    let mut open: Option<(DateTime<Utc>, usize, f64, f64)> = None;
    let mut trades = Vec::new();
    let mut nlv = cash;

    for j in 0..n {
        let (t, p) = bars[j];
        let here = sourced.get(&j).copied();
        if let Some(g) = here {
            if grid[g].boundary == t && sma[g].is_some() {
                level = sma[g];
            }
        }
        if let Some((et, eb, ep, mut high)) = open {
            if p > high {
                high = p;
            }
            let stopped = matches!(stop, Some(th) if p <= (1.0 - th) * high);
            let crossed = matches!(level, Some(l) if p < l);
            if stopped || crossed {
                let how = if stopped { RefExit::Stop } else { RefExit::Signal };
                let trade = RefTrade::new((et, eb, ep), (t, j, p), bars, how);
                nlv *= p / ep;
                trades.push(trade);
                open = None;
            } else {
                open = Some((et, eb, ep, high));
            }
        }
        if let Some(g) = here {
            if grid[g].boundary != t && sma[g].is_some() {
                level = sma[g];
            }
            if open.is_none() && j + 1 < n {
                if let Some(l) = sma[g] {
                    if grid[g].price > l {
                        if let Some(th) = calibrate(grid[g].boundary) {
                            stop = Some(th);
                        }
                        open = Some((grid[g].boundary, j, grid[g].price, grid[g].price));
                    }
                }
            }
        }
    }
    if let Some((et, eb, ep, _)) = open {
        let (t, p) = bars[n - 1];
        trades.push(RefTrade::new((et, eb, ep), (t, n - 1, p), bars, RefExit::Forced));
        nlv *= p / ep;
    }
    RefRun { trades, final_nlv: nlv }
}

/// Fixed-horizon artificial trades at every point where the entry rule fires.
pub fn ref_artificial(bars: &[(DateTime<Utc>, f64)], period: usize, horizon: usize) -> Vec<RefTrade> {
    let grid = ref_grid(bars);
    let sma = ref_sma(&grid, period);
    let mut out = Vec::new();
    for g in 0..grid.len() {
        if g + horizon >= grid.len() {
            break;
        }
        let Some(l) = sma[g] else { continue };
        if grid[g].price > l {
            let (a, b) = (grid[g], grid[g + horizon]);
            out.push(RefTrade::new(
                (a.boundary, a.bar, a.price),
                (b.boundary, b.bar, b.price),
                bars,
                RefExit::Horizon,
            ));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleThreshold {
    pub k: usize,
    pub threshold: f64,
    pub v: Vec<f64>,
    pub width: f64,
}

/// Cumulative expected return at every bin edge, each one summed directly
/// over the raw `(drawdown, return)` pairs.
pub fn oracle_threshold(samples: &[(f64, f64)], n: usize) -> Option<OracleThreshold> {
    let dmax = samples.iter().map(|s| s.0).fold(0.0, f64::max);
    if samples.is_empty() || dmax == 0.0 {
        return None;
    }
    let width = dmax / n as f64;
    let edge = |k: usize| if k + 1 == n { dmax } else { (k + 1) as f64 * width };
    let total = samples.len() as f64;
    let mut v = Vec::with_capacity(n);
    for k in 0..n {
        let mut sum = 0.0;
        for &(d, r) in samples {
            if k + 1 == n || d < edge(k) {
                sum += r;
            }
        }
        v.push(sum / total);
    }
    let mut best = 0;
    for k in 1..n {
        if v[k] > v[best] {
            best = k;
        }
    }
    Some(OracleThreshold {
        k: best,
        threshold: edge(best),
        v,
        width,
    })
}

pub fn sqrt_bins(count: usize) -> usize {
    ((count as f64).sqrt().ceil() as usize).max(1)
}

/// Per-entry calibration over `corpus`: trades that exited strictly before
/// the instant, optionally the latest `window` of them, at least
/// `min_corpus` of them, binned into `ceil(sqrt(count))` bins.
pub fn ref_calibrator(
    corpus: Vec<RefTrade>,
    window: Option<usize>,
    min_corpus: usize,
) -> impl FnMut(DateTime<Utc>) -> Option<f64> {
    move |at| {
        let mut visible: Vec<&RefTrade> = corpus
            .iter()
            .filter(|t| t.exit_time < at && t.exit != RefExit::Forced)
            .collect();
        if let Some(m) = window {
            visible.sort_by_key(|t| (t.exit_time, t.entry_time));
            let skip = visible.len().saturating_sub(m);
            visible.drain(..skip);
        }
        if visible.len() < min_corpus {
            return None;
        }
        let samples: Vec<(f64, f64)> = visible.iter().map(|t| (t.drawdown, t.ret)).collect();
        oracle_threshold(&samples, sqrt_bins(samples.len())).map(|o| o.threshold)
    }
}

/// Every file under `root`, keyed by relative path.
pub fn snapshot_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// Simpson's rule with `intervals` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    let h = (b - a) / intervals as f64;
    let mut sum = f(a) + f(b);
    for i in 1..intervals {
        let x = a + i as f64 * h;
        sum += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    sum * h / 3.0
}

/// Two-sided p-value of Student's t by quadrature. With `t = sqrt(v) tan(u)`
/// the density becomes proportional to `cos(u)^(v-1)` on `(-pi/2, pi/2)`.
pub fn t_two_sided_p_numeric(t: f64, dof: f64) -> f64 {
    let u0 = (t.abs() / dof.sqrt()).atan();
    let half_pi = std::f64::consts::FRAC_PI_2;
    let f = |u: f64| u.cos().powf(dof - 1.0);
    let tail = simpson(f, u0, half_pi, 200_000);
    let whole = simpson(f, -half_pi, half_pi, 200_000);
    2.0 * tail / whole
}
