import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ecoroute.errors import InsufficientDataError, UndefinedMetricError, ValidationError
from ecoroute.evalkit import (
    compare_models,
    compare_strategies,
    mape,
    mape_counted,
    metric_report,
    percentile,
    r_squared,
    split_links,
    weighted_mean,
    write_comparison,
)
from ecoroute.fuel import MotionFeatures
from ecoroute.router import RouteResult


def test_r_squared_examples():
    assert r_squared([1, 2, 4], [1, 2, 3]) == pytest.approx(0.5, abs=1e-12)
    t = np.array([0.3, 1.7, 2.2, 5.0])
    assert r_squared(t, t) == 1.0
    assert r_squared(np.full(4, t.mean()), t) == pytest.approx(0.0, abs=1e-12)


def test_mape_examples():
    assert mape([2, 3], [1, 4]) == pytest.approx(62.5, abs=1e-12)
    t = np.array([0.2, 1.5, 3.0, 40.0])
    assert mape(1.1 * t, t) == pytest.approx(10.0, abs=1e-12)
    assert mape(t, t) == 0.0


def test_metric_errors():
    with pytest.raises(UndefinedMetricError):
        r_squared([1, 2, 3], [2, 2, 2])
    with pytest.raises(UndefinedMetricError):
        r_squared([1], [1])
    with pytest.raises(UndefinedMetricError):
        mape([1, 2], [0, 0])
    with pytest.raises(ValidationError):
        mape([1, 2, 3], [1, 2])


def test_mape_skips_zero_truth():
    value, skipped = mape_counted([2, 5, 3], [1, 0, 4])
    assert skipped == 1 and value == pytest.approx(62.5, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50), st.floats(0.01, 100))
def test_equal_weights_give_the_mean(values, w):
    assert weighted_mean(values, [w] * len(values)) == pytest.approx(np.mean(values), rel=1e-12, abs=1e-12)


def test_weighted_mean_rejects_bad_weights():
    with pytest.raises(ValidationError):
        weighted_mean([1, 2], [1, -1])
    with pytest.raises(ValidationError):
        weighted_mean([1, 2], [0, 0])


def test_percentile_hand_cases():
    v = [7.0, 1.0, 3.0, 5.0]  # sorted 1 3 5 7, position q/100 * 3
    assert percentile(v, 0) == 1.0
    assert percentile(v, 100) == 7.0
    assert percentile(v, 50) == 4.0
    assert percentile(v, 10) == pytest.approx(1.6, abs=1e-12)
    assert percentile(v, 90) == pytest.approx(6.4, abs=1e-12)
    assert percentile([2.5], 90) == 2.5


def test_metric_report_by_category():
    rep = metric_report([1, 2, 4, 10, 10], [1, 2, 3, 10, 10], [11.18, 11.18, 11.18, 29.06, 29.06])
    assert rep.n == 5
    assert rep.by_category[11.18]["r_squared"] == pytest.approx(0.5)
    assert rep.by_category[29.06]["r_squared"] is None  # constant truth in that bin
    assert rep.by_category[29.06]["mape"] == 0.0
    json.dumps(rep.to_dict())


def _samples(n_links, per_link, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n_links):
        for _ in range(per_link):
            f = MotionFeatures(rng.uniform(3, 20), rng.normal(0, 2), 0.0, 200.0, 15.65)
            out.append((f, 0.01 + 0.001 * f.avg_speed + rng.normal(0, 1e-4), f"L{k}"))
    return out


class _Exact:
    def predict_batch(self, F):
        return 0.01 + 0.001 * F[:, 0]


class _Flat:
    def predict_batch(self, F):
        return np.full(len(F), 0.02)


def _exact_truth(features, fuel):
    return np.array([0.01 + 0.001 * f.avg_speed for f in features])


def test_model_equal_to_truth_is_perfect():
    reps = compare_models({"exact": _Exact(), "flat": _Flat()}, _samples(3, 120), truth_estimator=_exact_truth)
    assert reps["exact"].r_squared == 1.0 and reps["exact"].mape == 0.0
    assert reps["flat"].mape > 0


def test_compare_models_link_floor():
    samples = _samples(2, 101) + _samples(1, 100, seed=1)[:100]
    samples = [(f, y, lid if i < 202 else "short") for i, (f, y, lid) in enumerate(samples)]
    reps = compare_models({"exact": _Exact()}, samples, truth_estimator=_exact_truth)
    assert reps["exact"].n == 202
    with pytest.raises(InsufficientDataError):
        compare_models({"exact": _Exact()}, _samples(2, 100), truth_estimator=_exact_truth)


def test_compare_models_order_invariant():
    s = _samples(2, 110)
    a = compare_models({"a": _Exact(), "b": _Flat()}, s, truth_estimator=_exact_truth)
    b = compare_models({"b": _Flat(), "a": _Exact()}, s, truth_estimator=_exact_truth)
    assert {k: v.to_dict() for k, v in a.items()} == {k: v.to_dict() for k, v in b.items()}


def test_default_truth_estimator_tracks_the_signal():
    reps = compare_models({"exact": _Exact()}, _samples(2, 150), seed=0)
    assert reps["exact"].mape < 2.0


def test_split_links_deterministic_and_disjoint():
    ids = [f"L{k}" for k in range(20)]
    tr, te = split_links(ids, 0.7, seed=4)
    assert len(tr) == 14 and len(te) == 6 and not set(tr) & set(te)
    assert (tr, te) == split_links(list(reversed(ids)), 0.7, seed=4)


def _res(strategy, links, fuel, time):
    return RouteResult(strategy, links[0], links[-1], tuple(links), (), fuel, time, 100.0)


def _results():
    return {
        ("a", "z"): {
            "shortest": _res("shortest", ["a", "b", "z"], 1.2, 130.0),
            "fastest": _res("fastest", ["a", "c", "z"], 1.1, 100.0),
            "eco": _res("eco", ["a", "d", "z"], 1.0, 120.0),
            "constrained_eco": _res("constrained_eco", ["a", "d", "z"], 1.0, 120.0),
        },
        ("b", "y"): {
            "shortest": _res("shortest", ["b", "y"], 2.0, 50.0),
            "fastest": _res("fastest", ["b", "y"], 2.0, 50.0),
            "eco": _res("eco", ["b", "y"], 2.0, 50.0),
            "constrained_eco": _res("constrained_eco", ["b", "y"], 2.0, 50.0),
        },
    }


def test_strategy_normalisation_and_dominance():
    comp = compare_strategies(_results(), frequencies={("a", "z"): 3.0, ("b", "y"): 1.0})
    for r in comp.rows:
        if r["strategy"] == "fastest":
            assert r["norm_time"] == 1.0
        if r["strategy"] == "eco":
            assert r["norm_fuel"] == 1.0
    e = comp.expected
    assert all(e["eco"]["norm_fuel"] <= e[s]["norm_fuel"] for s in e)
    assert all(e["fastest"]["norm_time"] <= e[s]["norm_time"] for s in e)
    # weights 3:1 -> (3 * 1.2 + 1) / 4
    assert e["shortest"]["norm_fuel"] == pytest.approx(1.15, abs=1e-12)
    assert comp.coincidence["eco=constrained_eco"] == 1.0
    assert comp.coincidence["fastest=eco"] == 0.5


def test_missing_strategy_is_listed():
    res = _results()
    del res[("a", "z")]["eco"]
    with pytest.raises(ValidationError, match="a->z:eco"):
        compare_strategies(res)


def test_unrouted_od_skipped():
    res = _results()
    res[("b", "y")]["shortest"] = RouteResult("shortest", "b", "y", (), (), float("inf"), float("inf"), float("inf"))
    comp = compare_strategies(res)
    assert comp.skipped == ["b->y"]


def test_baseline_renormalisation():
    res = _results()
    comp = compare_strategies(res, baseline={("a", "z"): {"eco": _res("eco", ["a", "z"], 0.5, 0), "fastest": _res("fastest", ["a", "z"], 0.5, 50.0)}, ("b", "y"): res[("b", "y")]})
    row = next(r for r in comp.rows if r["od_id"] == "a->z" and r["strategy"] == "fastest")
    assert row["norm_time"] == 2.0 and row["norm_fuel"] == pytest.approx(2.2)


def test_write_comparison(tmp_path):
    comp = compare_strategies(_results())
    write_comparison(comp, tmp_path / "c.json", tmp_path / "c.csv")
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows[0] == ["strategy", "od_id", "fuel_kg", "time_s", "norm_fuel", "norm_time", "weight"]
    assert len(rows) == 9
    assert json.loads((tmp_path / "c.json").read_text())["n_od"] == 2
