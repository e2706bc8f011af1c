//! Seeded synthetic series: geometric Brownian motion, and "planted"
//! fixtures whose Signal-Only trades have a drawdown structure chosen in
//! advance.

use chrono::{DateTime, Duration, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{to_hourly_grid, BarSeries, PriceBar, MINUTES_PER_DAY, TRADING_DAYS};
use crate::error::{Error, Result};
use crate::signal::{compute_sma, run_signal_only, Outcome, DEFAULT_SMA_PERIOD};

/// First bar of every synthetic series. Synthetic series are continuous
/// minute sequences with no calendar.
pub const SYNTH_START: DateTime<Utc> = match DateTime::from_timestamp(1_451_916_000, 0) {
    Some(t) => t,
    None => panic!("valid constant"),
};

fn bars_from_prices(prices: &[f64]) -> Vec<PriceBar> {
    prices
        .iter()
        .enumerate()
        .map(|(i, &p)| PriceBar::new(SYNTH_START + Duration::minutes(i as i64), p))
        .collect()
}

/// Geometric Brownian motion at one-minute steps.
///
/// `mu` and `sigma` are annualized; the log-price increment per minute is
/// normal with mean `mu / (252 * 390)` and variance `sigma^2 / (252 * 390)`.
pub fn generate_gbm(seed: u64, p0: f64, mu: f64, sigma: f64, n_minutes: usize) -> Result<BarSeries> {
    if !(p0 > 0.0) || !p0.is_finite() {
        return Err(Error::InvalidParameter(format!("p0 must be positive, got {p0}")));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() || !mu.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "need finite mu and sigma >= 0, got mu={mu} sigma={sigma}"
        )));
    }
    if n_minutes == 0 {
        return Err(Error::InvalidParameter("n_minutes must be at least 1".into()));
    }
    let dt = 1.0 / (TRADING_DAYS * MINUTES_PER_DAY);
    let drift = mu * dt;
    let vol = sigma * dt.sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prices = Vec::with_capacity(n_minutes);
    let mut log_growth = 0.0_f64;
    prices.push(p0);
    for _ in 1..n_minutes {
        let z: f64 = rng.sample(StandardNormal);
        log_growth += drift + vol * z;
        prices.push(p0 * log_growth.exp());
    }
    if prices.iter().any(|p| !(*p > 0.0) || !p.is_finite()) {
        return Err(Error::InvalidParameter("GBM path left the positive reals".into()));
    }
    BarSeries::new(format!("gbm-{seed}"), bars_from_prices(&prices))
}

/// Two planted trade populations: shallow-drawdown winners that close at
/// `gain` and deep-drawdown losers that close at `loss`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub d_star: f64,
    pub gain: f64,
    pub loss: f64,
    pub n_trades: usize,
    pub loser_fraction: f64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            d_star: 0.02,
            gain: 0.05,
            loss: -0.05,
            n_trades: 100,
            loser_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedSeries {
    pub series: BarSeries,
    pub known_threshold: f64,
    pub n_winners: usize,
    pub n_losers: usize,
    /// With no losers every threshold at or above the largest drawdown is
    /// optimal, so `known_threshold` is only a lower bound.
    pub all_winners: bool,
}

const MINUTES_PER_HOUR: usize = 60;
const BASE_PRICE: f64 = 100.0;
const RESET_HOURS: usize = 25;
const RESET_DECAY: f64 = 0.0005;
const ENTRY_JUMP: f64 = 0.015;
const RAMP_HOURS: usize = 4;
const PLATEAU_HOURS: usize = 22;
const PLATEAU_DRIFT: f64 = 0.0001;
const EXIT_GAP: f64 = 0.003;
const LOSER_RISE_HOURS: usize = 2;

/// Appends minute prices; bar indices that are multiples of 60 sit on hour
/// boundaries.
struct PathBuilder {
    prices: Vec<f64>,
}

impl PathBuilder {
    fn new(start: f64) -> Self {
        Self { prices: vec![start] }
    }

    fn last(&self) -> f64 {
        self.prices[self.prices.len() - 1]
    }

    /// Linear path over one hour ending on the next boundary at `target`.
    fn hour_to(&mut self, target: f64) {
        let from = self.last();
        for m in 1..=MINUTES_PER_HOUR {
            let w = m as f64 / MINUTES_PER_HOUR as f64;
            self.prices.push(from + (target - from) * w);
        }
    }

    /// Holds for an hour, then jumps at the boundary bar.
    fn hour_then_jump(&mut self, target: f64) {
        let from = self.last();
        for _ in 1..MINUTES_PER_HOUR {
            self.prices.push(from);
        }
        self.prices.push(target);
    }

    /// One hour rising linearly to `target`, with a dip of depth `depth`
    /// below the running peak in the middle third.
    fn hour_with_dip(&mut self, target: f64, depth: f64) {
        let from = self.last();
        let peak = from + (target - from) * (24.0 / 60.0);
        for m in 1..=MINUTES_PER_HOUR {
            let w = m as f64 / MINUTES_PER_HOUR as f64;
            let p = if (25..=35).contains(&m) {
                peak * (1.0 - depth)
            } else {
                from + (target - from) * w
            };
            self.prices.push(p);
        }
    }

    /// Gaps to `exit` on the first minute of the hour, then drifts down.
    fn hour_exit(&mut self, exit: f64) {
        let end = exit * (1.0 - RESET_DECAY);
        for m in 1..=MINUTES_PER_HOUR {
            let w = (m - 1) as f64 / (MINUTES_PER_HOUR - 1) as f64;
            self.prices.push(exit + (end - exit) * w);
        }
    }

    fn reset(&mut self) {
        for _ in 0..RESET_HOURS {
            let next = self.last() * (1.0 - RESET_DECAY);
            self.hour_to(next);
        }
    }

    fn winner(&mut self, gain: f64, dip: f64) {
        let entry = self.last() * (1.0 + ENTRY_JUMP);
        self.hour_then_jump(entry);
        let exit = entry * (1.0 + gain);
        let plateau = exit / (1.0 - EXIT_GAP);
        let step = (plateau / entry).powf(1.0 / RAMP_HOURS as f64);
        for h in 1..=RAMP_HOURS {
            let target = entry * step.powi(h as i32);
            if h == 3 {
                self.hour_with_dip(target, dip);
            } else {
                self.hour_to(target);
            }
        }
        for _ in 0..PLATEAU_HOURS {
            let next = self.last() * (1.0 + PLATEAU_DRIFT);
            self.hour_to(next);
        }
        self.hour_exit(exit);
    }

    fn loser(&mut self, loss: f64, rise: f64) {
        let entry = self.last() * (1.0 + ENTRY_JUMP);
        self.hour_then_jump(entry);
        let top = entry * (1.0 + rise);
        for h in 1..=LOSER_RISE_HOURS {
            self.hour_to(entry + (top - entry) * h as f64 / LOSER_RISE_HOURS as f64);
        }
        self.hour_exit(entry * (1.0 + loss));
    }
}

/// Builds a series whose Signal-Only trades realize the planted structure.
///
/// Winners dip by a depth drawn from `[d*/4, d*]` and close at `gain`;
/// losers peak and then gap down to `loss`, with drawdowns drawn above
/// `max(d*, -loss)`. The output is checked by running the Signal-Only
/// strategy over it; parameter sets the path shapes cannot realize are
/// rejected with `InvalidParameter`.
pub fn generate_planted(seed: u64, spec: &PlantedSpec) -> Result<PlantedSeries> {
    let PlantedSpec {
        d_star,
        gain,
        loss,
        n_trades,
        loser_fraction,
    } = *spec;
    if !(d_star > 0.0 && d_star < 0.5) {
        return Err(Error::InvalidParameter(format!("d_star must be in (0, 0.5), got {d_star}")));
    }
    if !(gain > 0.0 && gain.is_finite()) {
        return Err(Error::InvalidParameter(format!("gain must be positive, got {gain}")));
    }
    if !(loss <= 0.0 && loss > -0.9) {
        return Err(Error::InvalidParameter(format!("loss must be in (-0.9, 0], got {loss}")));
    }
    if n_trades == 0 {
        return Err(Error::InvalidParameter("n_trades must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&loser_fraction) {
        return Err(Error::InvalidParameter(format!(
            "loser_fraction must be in [0, 1], got {loser_fraction}"
        )));
    }

    let n_losers = (n_trades as f64 * loser_fraction).round() as usize;
    let n_winners = n_trades - n_losers;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan: Vec<bool> = std::iter::repeat_n(true, n_winners)
        .chain(std::iter::repeat_n(false, n_losers))
        .collect();
    plan.shuffle(&mut rng);

    let loser_floor = (d_star * 1.25).max(-loss);
    let mut path = PathBuilder::new(BASE_PRICE);
    path.reset();
    for &is_winner in &plan {
        if is_winner {
            let dip = rng.gen_range(0.25 * d_star..=d_star);
            path.winner(gain, dip);
        } else {
            let depth = rng.gen_range(loser_floor..=loser_floor * 1.6).min(0.95);
            let rise = ((1.0 + loss) / (1.0 - depth) - 1.0).max(0.0);
            path.loser(loss, rise);
        }
        path.reset();
    }

    let series = BarSeries::new(format!("planted-{seed}"), bars_from_prices(&path.prices))?;
    verify_planted(&series, &plan, d_star)?;
    Ok(PlantedSeries {
        series,
        known_threshold: d_star,
        n_winners,
        n_losers,
        all_winners: n_losers == 0,
    })
}

fn verify_planted(series: &BarSeries, plan: &[bool], d_star: f64) -> Result<()> {
    let grid = to_hourly_grid(series);
    let sma = compute_sma(&grid, DEFAULT_SMA_PERIOD)?;
    let trades = run_signal_only(series, &sma, &grid, 1.0)?.trades;
    let fail = |why: String| Err(Error::InvalidParameter(format!("planted structure not realized: {why}")));
    if trades.len() != plan.len() {
        return fail(format!("expected {} trades, got {}", plan.len(), trades.len()));
    }
    for (i, (t, &is_winner)) in trades.iter().zip(plan).enumerate() {
        let ok = if is_winner {
            t.outcome == Outcome::Win && t.max_drawdown <= d_star
        } else {
            t.outcome == Outcome::Loss && t.max_drawdown > d_star
        };
        if !ok || t.is_forced() {
            return fail(format!(
                "trade {i} has return {} and drawdown {}",
                t.trade_return, t.max_drawdown
            ));
        }
    }
    Ok(())
}
