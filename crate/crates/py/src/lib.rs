//! Python bindings. Timestamps cross the boundary as RFC 3339 strings.

use chrono::{DateTime, SecondsFormat, Utc};
use pyo3::create_exception;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use stopcal::analytics;
use stopcal::backtest::{self, BacktestConfig, BinPolicy, Mode, Recalibration};
use stopcal::drawdown_stats::{self, DrawdownSample};
use stopcal::market_data::{self, PlantedSpec};
use stopcal::rolling::RollingParams;
use stopcal::signal::{self, TradeRecord};
use stopcal::Error;

create_exception!(stopcal, StopcalError, PyValueError);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        other => StopcalError::new_err(format!("{}: {}", other.kind(), other)),
    }
}

fn iso(ts: &DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Secs, true)
}

fn parse_ts(text: &str) -> PyResult<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(text)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| PyValueError::new_err(format!("bad timestamp `{text}`: {e}")))
}

/// A validated minute-bar price series.
#[pyclass(name = "BarSeries", module = "stopcal", frozen)]
#[derive(Clone)]
pub struct PyBarSeries {
    inner: market_data::BarSeries,
}

#[pymethods]
impl PyBarSeries {
    #[new]
    fn new(asset_id: &str, timestamps: Vec<String>, prices: Vec<f64>) -> PyResult<Self> {
        if timestamps.len() != prices.len() {
            return Err(to_py(Error::LengthMismatch(timestamps.len(), prices.len())));
        }
        let bars = timestamps
            .iter()
            .zip(prices)
            .map(|(t, p)| Ok(market_data::PriceBar::new(parse_ts(t)?, p)))
            .collect::<PyResult<Vec<_>>>()?;
        let inner = market_data::BarSeries::new(asset_id, bars).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load_csv(path: &str, asset_id: &str) -> PyResult<Self> {
        let inner = market_data::load_csv(path, asset_id).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (seed, p0=100.0, mu=0.0, sigma=0.2, n_minutes=23400))]
    fn gbm(seed: u64, p0: f64, mu: f64, sigma: f64, n_minutes: usize) -> PyResult<Self> {
        let inner = market_data::generate_gbm(seed, p0, mu, sigma, n_minutes).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn save_csv(&self, path: &str) -> PyResult<()> {
        market_data::save_csv(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn asset_id(&self) -> String {
        self.inner.asset_id().to_string()
    }

    fn timestamps(&self) -> Vec<String> {
        self.inner.bars().iter().map(|b| iso(&b.timestamp)).collect()
    }

    fn prices(&self) -> Vec<f64> {
        self.inner.bars().iter().map(|b| b.price).collect()
    }

    fn max_drawdown(&self, start: &str, end: &str) -> PyResult<f64> {
        signal::measure_max_drawdown(&self.inner, parse_ts(start)?, parse_ts(end)?).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("BarSeries({:?}, {} bars)", self.inner.asset_id(), self.inner.len())
    }
}

/// Returns `(series, d_star)` for a planted two-population fixture.
#[pyfunction]
#[pyo3(signature = (seed, d_star=0.02, gain=0.05, loss=-0.05, n_trades=100, loser_fraction=0.5))]
fn generate_planted(
    seed: u64,
    d_star: f64,
    gain: f64,
    loss: f64,
    n_trades: usize,
    loser_fraction: f64,
) -> PyResult<(PyBarSeries, f64)> {
    let spec = PlantedSpec {
        d_star,
        gain,
        loss,
        n_trades,
        loser_fraction,
    };
    let planted = market_data::generate_planted(seed, &spec).map_err(to_py)?;
    Ok((PyBarSeries { inner: planted.series }, planted.known_threshold))
}

#[pyclass(name = "Trade", module = "stopcal", frozen, get_all)]
#[derive(Clone)]
pub struct PyTrade {
    entry_time: String,
    exit_time: String,
    entry_price: f64,
    exit_price: f64,
    max_drawdown: f64,
    trade_return: f64,
    outcome: String,
    exit_reason: String,
}

impl From<&TradeRecord> for PyTrade {
    fn from(t: &TradeRecord) -> Self {
        Self {
            entry_time: iso(&t.entry_time),
            exit_time: iso(&t.exit_time),
            entry_price: t.entry_price,
            exit_price: t.exit_price,
            max_drawdown: t.max_drawdown,
            trade_return: t.trade_return,
            outcome: t.outcome.as_str().to_string(),
            exit_reason: format!("{:?}", t.exit_reason).to_lowercase(),
        }
    }
}

#[pymethods]
impl PyTrade {
    fn __repr__(&self) -> String {
        format!(
            "Trade({} -> {}, return={:.6}, drawdown={:.6}, {})",
            self.entry_time, self.exit_time, self.trade_return, self.max_drawdown, self.exit_reason
        )
    }
}

#[pyclass(name = "BacktestResult", module = "stopcal", frozen)]
pub struct PyBacktestResult {
    inner: backtest::BacktestResult,
}

#[pymethods]
impl PyBacktestResult {
    #[getter]
    fn asset_id(&self) -> &str {
        &self.inner.asset_id
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.mode.as_str()
    }

    #[getter]
    fn final_nlv(&self) -> f64 {
        self.inner.final_nlv
    }

    #[getter]
    fn trades(&self) -> Vec<PyTrade> {
        self.inner.trades.iter().map(PyTrade::from).collect()
    }

    #[getter]
    fn thresholds(&self) -> Vec<(String, f64)> {
        self.inner.thresholds_used.iter().map(|(t, v)| (iso(t), *v)).collect()
    }

    fn equity(&self) -> Vec<(String, f64)> {
        self.inner.curve.samples.iter().map(|(t, v)| (iso(t), *v)).collect()
    }

    fn summary_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.summary()).map_err(|e| to_py(e.into()))
    }

    fn write_bundle(&self, dir: &str) -> PyResult<()> {
        self.inner.write_bundle(dir.as_ref()).map_err(to_py)
    }
}

#[pyclass(name = "ThresholdReport", module = "stopcal", frozen)]
pub struct PyThresholdReport {
    inner: drawdown_stats::ThresholdReport,
}

#[pymethods]
impl PyThresholdReport {
    #[getter]
    fn threshold(&self) -> f64 {
        self.inner.threshold
    }

    /// Zero-based index of the chosen bin.
    #[getter]
    fn k_star(&self) -> usize {
        self.inner.k_star
    }

    #[getter]
    fn n_bins(&self) -> usize {
        self.inner.n_bins
    }

    #[getter]
    fn width(&self) -> f64 {
        self.inner.width
    }

    #[getter]
    fn corpus_size(&self) -> usize {
        self.inner.corpus_size
    }

    #[getter]
    fn upper_edges(&self) -> Vec<f64> {
        self.inner.upper_edges.clone()
    }

    #[getter]
    fn v(&self) -> Vec<f64> {
        self.inner.v.clone()
    }

    #[getter]
    fn p(&self) -> Vec<f64> {
        self.inner.p.clone()
    }

    #[getter]
    fn e(&self) -> Vec<f64> {
        self.inner.e.clone()
    }

    #[getter]
    fn expected_return_negative(&self) -> bool {
        self.inner.expected_return_negative
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "ThresholdReport(T={}, bin {}/{}, corpus {})",
            self.inner.threshold,
            self.inner.k_star + 1,
            self.inner.n_bins,
            self.inner.corpus_size
        )
    }
}

#[allow(clippy::too_many_arguments)]
fn make_config(
    mode: &str,
    initial_cash: f64,
    n_bins: Option<usize>,
    horizon: usize,
    window: usize,
    min_corpus: usize,
    recalibrate: &str,
    fixed_threshold: Option<f64>,
    include_forced: bool,
) -> PyResult<BacktestConfig> {
    let config = BacktestConfig {
        mode: mode.parse::<Mode>().map_err(to_py)?,
        initial_cash,
        n_policy: n_bins.map_or(BinPolicy::Sqrt, BinPolicy::Fixed),
        rolling: RollingParams::new(horizon, window).map_err(to_py)?,
        recalibration: recalibrate.parse::<Recalibration>().map_err(to_py)?,
        min_corpus,
        include_forced_final_trade: include_forced,
        fixed_threshold,
        ..BacktestConfig::default()
    };
    config.validate().map_err(to_py)?;
    Ok(config)
}

#[pyfunction]
#[pyo3(signature = (
    series, mode="signal-only", initial_cash=100_000.0, n_bins=None, horizon=20, window=250,
    min_corpus=30, recalibrate="per-entry", fixed_threshold=None, exclude_forced=false
))]
#[allow(clippy::too_many_arguments)]
fn run_backtest(
    py: Python<'_>,
    series: &PyBarSeries,
    mode: &str,
    initial_cash: f64,
    n_bins: Option<usize>,
    horizon: usize,
    window: usize,
    min_corpus: usize,
    recalibrate: &str,
    fixed_threshold: Option<f64>,
    exclude_forced: bool,
) -> PyResult<PyBacktestResult> {
    let config = make_config(
        mode,
        initial_cash,
        n_bins,
        horizon,
        window,
        min_corpus,
        recalibrate,
        fixed_threshold,
        !exclude_forced,
    )?;
    let inner = py
        .allow_threads(|| backtest::run_backtest(&series.inner, &config))
        .map_err(to_py)?;
    Ok(PyBacktestResult { inner })
}

/// Calibrates a threshold from parallel lists of drawdowns and returns.
#[pyfunction]
#[pyo3(signature = (drawdowns, returns, n_bins=None))]
fn calibrate(drawdowns: Vec<f64>, returns: Vec<f64>, n_bins: Option<usize>) -> PyResult<PyThresholdReport> {
    if drawdowns.len() != returns.len() {
        return Err(to_py(Error::LengthMismatch(drawdowns.len(), returns.len())));
    }
    let samples: Vec<DrawdownSample> = drawdowns
        .into_iter()
        .zip(returns)
        .map(|(drawdown, trade_return)| DrawdownSample { drawdown, trade_return })
        .collect();
    let n = n_bins.unwrap_or_else(|| drawdown_stats::default_bin_count(samples.len()));
    let bins = drawdown_stats::bin_samples(&samples, n).map_err(to_py)?;
    let inner = drawdown_stats::calibrate_threshold(&bins).map_err(to_py)?;
    Ok(PyThresholdReport { inner })
}

/// Calibrates on a series with the `t` or `r` method, optionally as of an
/// RFC 3339 instant.
#[pyfunction]
#[pyo3(signature = (series, method="t", as_of=None, n_bins=None, horizon=20, window=250))]
fn calibrate_series(
    series: &PyBarSeries,
    method: &str,
    as_of: Option<&str>,
    n_bins: Option<usize>,
    horizon: usize,
    window: usize,
) -> PyResult<PyThresholdReport> {
    let config = make_config(method, 100_000.0, n_bins, horizon, window, 1, "per-entry", None, true)?;
    let as_of = as_of.map(parse_ts).transpose()?;
    let inner = backtest::calibrate_series(&series.inner, &config, as_of).map_err(to_py)?;
    Ok(PyThresholdReport { inner })
}

#[pyfunction]
fn delta_nlv(nlv_variant: f64, nlv_signal: f64) -> PyResult<f64> {
    analytics::delta_nlv(nlv_variant, nlv_signal).map_err(to_py)
}

/// Returns `(rho, p_value)`.
#[pyfunction]
fn pearson(x: Vec<f64>, y: Vec<f64>) -> PyResult<(f64, f64)> {
    let r = analytics::pearson(&x, &y).map_err(to_py)?;
    Ok((r.rho, r.p_value))
}

#[pyfunction]
fn aggregate<'py>(py: Python<'py>, deltas: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let s = analytics::aggregate_deltas(&deltas).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("n_assets", s.n_assets)?;
    d.set_item("win_fraction", s.win_fraction)?;
    d.set_item("mean_gain_winners", s.mean_gain_winners)?;
    d.set_item("mean_loss_losers", s.mean_loss_losers)?;
    d.set_item("expected_change", s.expected_change)?;
    Ok(d)
}

#[pymodule]
#[pyo3(name = "stopcal")]
fn stopcal_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("StopcalError", m.py().get_type::<StopcalError>())?;
    m.add_class::<PyBarSeries>()?;
    m.add_class::<PyTrade>()?;
    m.add_class::<PyBacktestResult>()?;
    m.add_class::<PyThresholdReport>()?;
    m.add_function(wrap_pyfunction!(generate_planted, m)?)?;
    m.add_function(wrap_pyfunction!(run_backtest, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_series, m)?)?;
    m.add_function(wrap_pyfunction!(delta_nlv, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use pyo3::ffi::c_str;
    use pyo3::types::PyModule;

    fn with_module(code: &std::ffi::CStr) {
        pyo3::prepare_freethreaded_python();
        Python::with_gil(|py| {
            let module = PyModule::new(py, "stopcal").unwrap();
            stopcal_py(&module).unwrap();
            let globals = PyDict::new(py);
            globals.set_item("stopcal", module).unwrap();
            py.run(code, Some(&globals), None).unwrap();
        });
    }

    #[test]
    fn backtest_from_python() {
        with_module(c_str!(
            r#"
s = stopcal.BarSeries.gbm(5, n_minutes=40 * 390)
base = stopcal.run_backtest(s)
inert = stopcal.run_backtest(s, mode="r", fixed_threshold=1.0)
assert [t.exit_time for t in base.trades] == [t.exit_time for t in inert.trades]
assert stopcal.delta_nlv(inert.final_nlv, base.final_nlv) == 0.0
"#
        ));
    }

    #[test]
    fn errors_surface_as_exceptions() {
        with_module(c_str!(
            r#"
try:
    stopcal.calibrate([0.1], [0.1, 0.2])
    raise AssertionError("expected failure")
except stopcal.StopcalError as e:
    assert "LengthMismatch" in str(e)
try:
    stopcal.run_backtest(stopcal.BarSeries.gbm(1, n_minutes=100), mode="sideways")
    raise AssertionError("expected failure")
except ValueError:
    pass
"#
        ));
    }
}
