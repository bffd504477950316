import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ecoroute.network import Link, write_network
from ecoroute.synth import (
    CongestionModel,
    SpeedProfile,
    fuel_oracle,
    generate_corpus,
    generate_grid_network,
    generate_link_corpus,
    simulate_traversal,
)
from ecoroute.vehicle import SPEED_LIMITS, VehicleParams

FLAT_400 = Link("F", 400.0, 0.0, 20.12)


def _grid_oracle(rows, cols):
    """Directed links and non-U-turn movements of a full grid, by enumeration."""
    deg = {}
    n_seg = 0
    for r in range(rows):
        for c in range(cols):
            for dr, dc in ((0, 1), (1, 0)):
                if r + dr < rows and c + dc < cols:
                    n_seg += 1
                    for node in ((r, c), (r + dr, c + dc)):
                        deg[node] = deg.get(node, 0) + 1
    # each inbound link at a node may leave on any other street
    return 2 * n_seg, sum(d * (d - 1) for d in deg.values())


@pytest.mark.parametrize("rows,cols,links", [(2, 2, 8), (20, 20, 1520), (3, 5, 44)])
def test_grid_link_count(rows, cols, links):
    net = generate_grid_network(rows, cols, seed=1)
    n_links, n_moves = _grid_oracle(rows, cols)
    assert len(net) == links == n_links
    assert net.n_movements == n_moves


def test_grid_contract():
    net = generate_grid_network(6, 7, seed=3)
    for lid, link in net.links.items():
        assert link.speed_limit in SPEED_LIMITS
        assert abs(link.grade) <= 0.08
        back = net.links[link.reverse_of]
        assert back.reverse_of == lid
        assert back.grade == -link.grade
        assert back.length == link.length
        assert link.has_coords


def test_grid_grades_follow_the_default_spread():
    net = generate_grid_network(40, 40, seed=11)
    g = np.array([l.grade for l in net.links.values()])
    assert abs(g.std() - 0.02) < 0.002


def test_grid_deterministic(tmp_path):
    paths = []
    for k in range(2):
        net = generate_grid_network(8, 9, seed=42)
        lf, mf = tmp_path / f"l{k}.csv", tmp_path / f"m{k}.csv"
        write_network(net, lf, mf)
        paths.append((lf.read_bytes(), mf.read_bytes()))
    assert paths[0] == paths[1]


def test_grid_needs_two_by_two():
    with pytest.raises(ValueError):
        generate_grid_network(1, 5, seed=0)


def test_oracle_idle_only():
    p = VehicleParams()
    assert fuel_oracle(SpeedProfile(np.zeros(61)), FLAT_400, p) == pytest.approx(60 * p.idle_fuel_rate, rel=1e-15)


def test_oracle_steady_closed_form():
    # 20 m/s for 20 s over a flat link: drag + rolling only
    force = 0.5 * 1.2 * 0.65 * 20.0**2 + 0.009 * 1246.0 * 9.81
    expected = (1.8e-4 + 0.07e-6 * force * 20.0) * 20.0
    assert expected == pytest.approx(0.01104826152, rel=1e-10)
    got = fuel_oracle(SpeedProfile(np.full(21, 20.0)), FLAT_400)
    assert got == pytest.approx(expected, rel=1e-12)


def test_oracle_uphill_costs_more():
    prof = SpeedProfile(np.full(21, 15.0))
    up = fuel_oracle(prof, Link("U", 300.0, 0.02, 15.65))
    down = fuel_oracle(prof, Link("D", 300.0, -0.02, 15.65))
    assert up > down


@settings(max_examples=60, deadline=None)
@given(
    v=arrays(np.float64, st.integers(1, 80), elements=st.floats(0, 40)),
    grade=st.floats(-0.08, 0.08),
    shift=st.floats(-1e5, 1e5),
)
def test_oracle_properties(v, grade, shift):
    link = Link("P", 100.0, grade, 20.12)
    prof = SpeedProfile(v)
    f = fuel_oracle(prof, link)
    # braking is never refunded
    assert f >= prof.duration * VehicleParams().idle_fuel_rate * (1 - 1e-12)
    assert fuel_oracle(SpeedProfile(v, t0=shift), link) == f


@pytest.mark.parametrize("seed", range(8))
def test_free_flow_speed(seed):
    link = Link("H", 600.0, 0.0, 29.06)
    _, trav = simulate_traversal(link, 0.0, seed)
    assert 0.85 * 29.06 <= trav.avg_speed <= 29.06


@pytest.mark.parametrize("limit", SPEED_LIMITS)
@pytest.mark.parametrize("seed", range(4))
def test_heavy_congestion_speed(limit, seed):
    link = Link("C", 500.0, 0.01, limit)
    _, trav = simulate_traversal(link, 1.0, seed)
    assert trav.avg_speed < 0.5 * limit


def test_speed_falls_with_congestion():
    link = Link("M", 800.0, 0.0, 20.12)
    means = [np.mean([simulate_traversal(link, c, s)[1].avg_speed for s in range(20)]) for c in (0.0, 0.5, 1.0)]
    assert means[0] > means[1] > means[2]


def test_traversal_is_consistent_and_deterministic():
    link = Link("K", 350.0, -0.01, 15.65)
    prof, trav = simulate_traversal(link, 0.6, 9, stop_dwell=20.0, calming=2)
    again, trav2 = simulate_traversal(link, 0.6, 9, stop_dwell=20.0, calming=2)
    np.testing.assert_array_equal(prof.v, again.v)
    assert trav == trav2
    assert prof.distance == pytest.approx(link.length, rel=1e-12)
    assert trav.exit_time - trav.entry_time == pytest.approx(prof.duration)
    assert trav.fuel == pytest.approx(fuel_oracle(prof, link))
    assert np.all(prof.v >= 0)
    # the red light brings the car to a full stop
    assert prof.v.min() < 0.05


def test_corpora_reproducible():
    net = generate_grid_network(4, 4, seed=2)
    a = generate_corpus(net, 3, seed=8)
    b = generate_corpus(net, 3, seed=8)
    assert [t.traversals for t in a] == [t.traversals for t in b]
    ids = net.ids[:3]
    assert generate_link_corpus(net, ids, 5, seed=1) == generate_link_corpus(net, ids, 5, seed=1)


def test_trips_follow_movements():
    net = generate_grid_network(5, 5, seed=4)
    for trip in generate_corpus(net, 2, seed=3)[:20]:
        for a, b in zip(trip.traversals, trip.traversals[1:]):
            assert net.idx(b.link_id) in net.succ[net.idx(a.link_id)]
            assert b.entry_time == a.exit_time


def test_congestion_traits_reflect_category():
    net = generate_grid_network(12, 12, seed=0)
    traits = CongestionModel().link_traits(net, np.random.default_rng(0))
    stop = {lim: [] for lim in SPEED_LIMITS}
    for lid, tr in traits.items():
        stop[net.links[lid].speed_limit].append(tr.stop_prob)
    present = [lim for lim in SPEED_LIMITS if stop[lim]]
    means = [np.mean(stop[lim]) for lim in present]
    assert means == sorted(means, reverse=True)
    assert math.isclose(max(stop.get(29.06, [0.0]) or [0.0]), 0.0)
