import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ecoroute.errors import InsufficientDataError, ParseError, ValidationError
from ecoroute.ingest import (
    LinkSpeedModel,
    LinkTraversal,
    TripFilters,
    compute_features,
    estimate_window_speed,
    fit_link_speed_model,
    historical_speeds,
    load_trips,
    read_speeds,
    window_mixing_posterior,
    write_speeds,
    write_traversals,
)
from ecoroute.network import Link, RoadNetwork
from ecoroute.vbgmm import GaussianMixture

HEADER = "trip_id,seq,link_id,entry_time_s,exit_time_s,entry_speed_mps,exit_speed_mps,avg_speed_mps,fuel_kg\n"


def _trip_rows(trip_id, duration, distance, n=2):
    """n traversals of equal dwell whose recorded speeds add up to ``distance``."""
    dwell = duration / n
    v = distance / duration
    return [f"{trip_id},{k},L{k},{k * dwell},{(k + 1) * dwell},{v},{v},{v},0.01\n" for k in range(n)]


def _write(tmp_path, rows, name="trips.csv"):
    p = tmp_path / name
    p.write_text(HEADER + "".join(rows))
    return p


def test_filter_examples(tmp_path):
    rows = _trip_rows("short", 500, 5000) + _trip_rows("near", 700, 200) + _trip_rows("ok", 601, 301)
    trips = load_trips(_write(tmp_path, rows))
    assert [t.trip_id for t in trips] == ["ok"]
    assert trips.dropped == {"duration": 1, "distance": 1}


def test_filter_boundaries_are_strict(tmp_path):
    trips = load_trips(_write(tmp_path, _trip_rows("edge", 600, 400)))
    assert len(trips) == 0
    trips = load_trips(_write(tmp_path, _trip_rows("edge", 601, 300)))
    assert len(trips) == 0


def test_non_monotone_seq_rejected(tmp_path):
    rows = _trip_rows("ok", 700, 400)
    bad = [
        "bad,1,L0,0,350,1,1,1,\n",
        "bad,0,L1,350,700,1,1,1,\n",
    ]
    trips = load_trips(_write(tmp_path, rows + bad))
    assert [t.trip_id for t in trips] == ["ok"]
    assert trips.rejected == {"bad": "non-monotone seq"}


def test_disconnected_trip_rejected(tmp_path):
    net = RoadNetwork([Link(f"L{i}", 200.0, 0.0, 10.0) for i in range(2)], [])
    trips = load_trips(_write(tmp_path, _trip_rows("t", 700, 400)), network=net)
    assert len(trips) == 0
    assert "movement" in trips.rejected["t"]


@pytest.mark.parametrize(
    "row,msg",
    [
        ("t,0,L0,0,abc,1,1,,\n", "exit_time_s"),
        ("t,x,L0,0,1,1,1,,\n", "seq"),
        ("t,0,L0,5,5,1,1,,\n", "exit_time"),
        ("t,0,L0,0,5,-1,1,,\n", "negative"),
    ],
)
def test_parse_errors_name_the_line(tmp_path, row, msg):
    with pytest.raises(ParseError, match=msg) as err:
        load_trips(_write(tmp_path, [row]))
    assert ":2" in str(err.value) or "line 2" in str(err.value)


def test_traversal_roundtrip(tmp_path):
    p = _write(tmp_path, _trip_rows("a", 900, 1000, n=3))
    trips = load_trips(p)
    out = tmp_path / "again.csv"
    write_traversals(trips, out)
    assert load_trips(out).traversals() == trips.traversals()


LINK = Link("L", 200.0, 0.015, 15.65)


def _trav(entry, exit_, t0=0.0, t1=20.0, avg=None):
    return LinkTraversal("t", 0, "L", t0, t1, entry, exit_, avg)


def test_features_steady():
    f = compute_features(_trav(10.0, 10.0, avg=10.0), LINK)
    assert f.speed_change == 0.0
    assert (f.grade, f.length, f.speed_limit) == (0.015, 200.0, 15.65)


def test_features_speed_change():
    assert compute_features(_trav(5.0, 15.0, avg=9.0), LINK).speed_change == 10.0


def test_features_average_from_dwell():
    assert compute_features(_trav(9.0, 11.0), LINK).avg_speed == 10.0


def test_features_wrong_link():
    with pytest.raises(ValidationError):
        compute_features(LinkTraversal("t", 0, "other", 0, 1, 1, 1), LINK)


def test_speed_model_two_modes():
    rng = np.random.default_rng(3)
    lab = rng.random(1000) < 0.5
    v = np.where(lab, rng.normal(8, 1, 1000), rng.normal(16, 1, 1000))
    m = fit_link_speed_model(v, max_components=5)
    means = np.sort(m.means)
    assert len(means) == 2
    # oracle: sample means of each generating label
    assert abs(means[0] - v[lab].mean()) < 0.3 and abs(means[0] - 8) < 0.3
    assert abs(means[1] - v[~lab].mean()) < 0.3 and abs(means[1] - 16) < 0.3


def test_speed_model_degenerate():
    v = 12.0 + 1e-4 * np.random.default_rng(0).standard_normal(50)
    m = fit_link_speed_model(v)
    assert m.mixture.n_components == 1
    assert m.means[0] == pytest.approx(12.0, abs=1e-3)
    const = fit_link_speed_model(np.full(50, 12.0))
    assert const.mixture.covariances[0, 0, 0] == pytest.approx(1e-4)


def test_speed_model_small_sample_fallback():
    v = np.array([3.0, 9.0, 4.0, 11.0, 7.0, 5.0, 10.0, 8.0, 6.0, 12.0])
    m = fit_link_speed_model(v, max_components=3)
    assert m.mixture.n_components == 1
    assert m.means[0] == pytest.approx(v.mean())
    assert m.mixture.covariances[0, 0, 0] == pytest.approx(v.var())


def test_speed_model_needs_samples():
    with pytest.raises(InsufficientDataError):
        fit_link_speed_model([])


def _two_mode():
    return LinkSpeedModel("L", GaussianMixture([0.5, 0.5], [[8.0], [16.0]], [[[1.0]], [[1.0]]]))


def test_window_single_component():
    m = LinkSpeedModel("L", GaussianMixture([1.0], [[11.0]], [[[4.0]]]))
    assert estimate_window_speed(m, [1.0, 30.0]) == 11.0


def test_window_all_fast():
    # independent scalar evaluation of the component posteriors at v = 16
    def post(v):
        a = math.exp(-0.5 * (v - 8.0) ** 2)
        b = math.exp(-0.5 * (v - 16.0) ** 2)
        return a / (a + b), b / (a + b)

    c1, c2 = post(16.0)
    oracle = 8.0 * c1 + 16.0 * c2
    got = estimate_window_speed(_two_mode(), [16.0] * 7)
    assert got == pytest.approx(oracle, abs=1e-12)
    assert abs(got - 16.0) < 0.1


def test_window_empty_is_prior_mean():
    assert estimate_window_speed(_two_mode(), []) == 12.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 40), max_size=30), st.floats(0.05, 0.95))
def test_window_posterior_properties(samples, w):
    m = LinkSpeedModel("L", GaussianMixture([w, 1 - w], [[6.0], [14.0]], [[[2.0]], [[3.0]]]))
    c = window_mixing_posterior(m, samples)
    assert np.all(c >= 0)
    assert abs(c.sum() - 1) < 1e-9
    est = estimate_window_speed(m, samples)
    assert 6.0 - 1e-9 <= est <= 14.0 + 1e-9


def test_historical_speeds_fallback_and_window(tmp_path):
    net = RoadNetwork([Link("A", 100.0, 0.0, 20.0), Link("B", 100.0, 0.0, 25.0)], [("A", "B")])
    travs = [LinkTraversal(f"t{k}", 0, "A", 0.0, 10.0, 10.0, 10.0, 10.0) for k in range(30)]
    hs = historical_speeds(net, travs)
    assert hs["A"] == pytest.approx(10.0)
    assert hs["B"] == 25.0 and hs.imputed == {"B"}
    p = tmp_path / "speeds.csv"
    write_speeds(hs, p)
    back = read_speeds(p)
    assert back.speed == pytest.approx(hs.speed) and back.imputed == hs.imputed
