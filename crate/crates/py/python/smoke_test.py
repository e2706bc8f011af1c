"""Smoke test for the stopcal extension module.

Build and install the module first, e.g. `maturin develop --release` from
crates/py, then run `python python/smoke_test.py`.
"""

import json
import math
import os
import sys
import tempfile

import stopcal


def check(cond, msg):
    if not cond:
        print("FAIL:", msg)
        sys.exit(1)


def main():
    walk = stopcal.BarSeries.gbm(42, p0=100.0, sigma=0.3, n_minutes=60 * 390)
    check(len(walk) == 60 * 390, "gbm length")
    ts = walk.timestamps()
    check(ts[0] == "2016-01-04T14:00:00Z", "synthetic start")

    base = stopcal.run_backtest(walk)
    t_run = stopcal.run_backtest(walk, mode="t-method", min_corpus=10)
    r_run = stopcal.run_backtest(walk, mode="r-method", min_corpus=10)
    check(len(base.trades) > 0, "signal-only trades")
    check(all(t.exit_reason != "stop" for t in base.trades), "no stops without a threshold")
    check(len(t_run.thresholds) > 0, "T method armed")
    check(len(r_run.thresholds) > 0, "R method armed")

    # A threshold of 1 can never fire.
    inert = stopcal.run_backtest(walk, mode="t-method", fixed_threshold=1.0)
    check([t.exit_time for t in inert.trades] == [t.exit_time for t in base.trades], "T >= 1 identity")
    check(inert.final_nlv == base.final_nlv, "T >= 1 NLV")

    # Drawdowns on every trade match a direct measurement.
    for t in base.trades:
        check(walk.max_drawdown(t.entry_time, t.exit_time) == t.max_drawdown, "trade drawdown")

    series, d_star = stopcal.generate_planted(3)
    report = stopcal.calibrate_series(series, method="t")
    check(abs(report.threshold - d_star) <= report.width, "planted threshold within one bin")
    check(report.n_bins == 10 and report.corpus_size == 100, "sqrt policy on 100 trades")
    check(abs(sum(report.p) - 1.0) < 1e-12, "probabilities sum to 1")

    direct = stopcal.calibrate([0.005, 0.015, 0.03], [0.004, -0.002, 0.006], n_bins=3)
    check(direct.k_star == 2 and direct.threshold == 0.03, "small calibration")
    check(json.loads(direct.to_json())["n_bins"] == 3, "report json")

    try:
        stopcal.calibrate([0.0, 0.0], [0.1, -0.1])
        check(False, "all-zero drawdowns should raise")
    except stopcal.StopcalError as e:
        check("AllZeroDrawdowns" in str(e), "error kind in message")

    rho, p = stopcal.pearson([1.0, 2.0, 3.0, 4.0], [2.0, 4.0, 6.0, 8.0])
    check(abs(rho - 1.0) < 1e-12 and p < 1e-12, "perfect correlation")
    agg = stopcal.aggregate([0.1, -0.1, 0.0])
    check(math.isclose(agg["win_fraction"], 1 / 3), "aggregate win fraction")
    check(stopcal.delta_nlv(110.0, 100.0) - 0.1 < 1e-15, "delta")

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "walk.csv")
        walk.save_csv(path)
        again = stopcal.BarSeries.load_csv(path, "walk")
        check(again.prices() == walk.prices(), "csv round trip")
        t_run.write_bundle(os.path.join(d, "bundle"))
        check(sorted(os.listdir(os.path.join(d, "bundle")))
              == ["equity.csv", "summary.json", "thresholds.csv", "trades.csv"], "bundle files")

    print("smoke test passed:", base.final_nlv, t_run.final_nlv, r_run.final_nlv, report)


if __name__ == "__main__":
    main()
