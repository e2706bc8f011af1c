use chrono::{DateTime, Duration, DurationRound, Utc};

use super::BarSeries;

/// One hourly decision point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    /// The hour boundary.
    pub timestamp: DateTime<Utc>,
    /// Price of the latest minute bar at or before the boundary.
    pub price: f64,
    /// Index of that minute bar in the source series.
    pub bar_index: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct HourlyGrid {
    pub points: Vec<GridPoint>,
}

impl HourlyGrid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn prices(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().map(|p| p.price)
    }
}

/// The hour boundary a bar belongs to: the first boundary at or after it.
pub(crate) fn hour_ceiling(ts: DateTime<Utc>) -> DateTime<Utc> {
    let floor = ts
        .duration_trunc(Duration::hours(1))
        .expect("hour truncation is in range");
    if floor == ts {
        ts
    } else {
        floor + Duration::hours(1)
    }
}

/// Samples the series at hour boundaries.
///
/// A boundary `H` gets a point when at least one bar lies in `(H - 1h, H]`;
/// the point carries the latest such bar. Bars are sorted, so each bar's
/// boundary is its hour ceiling and the groups are contiguous runs.
pub fn to_hourly_grid(series: &BarSeries) -> HourlyGrid {
    let mut points: Vec<GridPoint> = Vec::new();
    for (i, bar) in series.bars().iter().enumerate() {
        let boundary = hour_ceiling(bar.timestamp);
        match points.last_mut() {
            Some(last) if last.timestamp == boundary => {
                last.price = bar.price;
                last.bar_index = i;
            }
            _ => points.push(GridPoint {
                timestamp: boundary,
                price: bar.price,
                bar_index: i,
            }),
        }
    }
    HourlyGrid { points }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::PriceBar;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn at(h: u32, m: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2016, 1, 4, h, m, 0).unwrap()
    }

    #[test]
    fn full_hour_of_bars() {
        let bars: Vec<_> = (0..=60)
            .map(|m| PriceBar::new(at(14, 0) + Duration::minutes(m), 100.0 + m as f64 / 120.0))
            .collect();
        let s = BarSeries::new("X", bars).unwrap();
        let grid = to_hourly_grid(&s);
        let last = grid.points.last().unwrap();
        assert_eq!(last.timestamp, at(15, 0));
        assert_eq!(last.price, 100.5);
        assert_eq!(last.bar_index, 60);
        assert_eq!(grid.points[0].timestamp, at(14, 0));
    }

    #[test]
    fn missing_boundary_bar_uses_latest_before() {
        let bars = vec![
            PriceBar::new(at(14, 30), 1.0),
            PriceBar::new(at(14, 59), 2.0),
            PriceBar::new(at(15, 1), 3.0),
        ];
        let s = BarSeries::new("X", bars).unwrap();
        let grid = to_hourly_grid(&s);
        assert_eq!(grid.points[0].timestamp, at(15, 0));
        assert_eq!(grid.points[0].price, 2.0);
        assert_eq!(grid.points[0].bar_index, 1);
        assert_eq!(grid.points[1].timestamp, at(16, 0));
    }

    #[test]
    fn short_series_grid() {
        let s = BarSeries::new("X", vec![PriceBar::new(at(14, 10), 1.0)]).unwrap();
        assert_eq!(to_hourly_grid(&s).len(), 1);
    }

    fn brute_force_grid(series: &BarSeries) -> Vec<(DateTime<Utc>, f64, usize)> {
        let first = series.first_timestamp().duration_trunc(Duration::hours(1)).unwrap();
        let last = series.last_timestamp() + Duration::hours(1);
        let mut out = Vec::new();
        let mut boundary = first;
        while boundary <= last {
            let mut latest = None;
            for (i, b) in series.bars().iter().enumerate() {
                if b.timestamp > boundary - Duration::hours(1) && b.timestamp <= boundary {
                    latest = Some(i);
                }
            }
            if let Some(i) = latest {
                out.push((boundary, series.price(i), i));
            }
            boundary += Duration::hours(1);
        }
        out
    }

    proptest! {
        #[test]
        fn matches_brute_force_scan(gaps in prop::collection::vec(1i64..200, 1..300), seed in 0u64..1000) {
            let mut t = at(9, 0) + Duration::minutes((seed % 60) as i64);
            let mut bars = Vec::new();
            for (k, g) in gaps.iter().enumerate() {
                bars.push(PriceBar::new(t, 1.0 + k as f64));
                t += Duration::minutes(*g);
            }
            let s = BarSeries::new("X", bars).unwrap();
            let grid = to_hourly_grid(&s);
            let got: Vec<_> = grid.points.iter().map(|p| (p.timestamp, p.price, p.bar_index)).collect();
            prop_assert_eq!(got, brute_force_grid(&s));
            prop_assert_eq!(to_hourly_grid(&s), grid);
        }
    }
}
