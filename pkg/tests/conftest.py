import numpy as np
import pytest

from ecoroute.network import Link, RoadNetwork
from ecoroute.router import EdgeCost, LinkCosts


def chain_network(specs, movements, limit=10.0):
    """Network from {id: length} (or {id: Link}) plus movement pairs."""
    links = []
    for lid, spec in specs.items():
        links.append(spec if isinstance(spec, Link) else Link(lid, float(spec), 0.0, limit))
    return RoadNetwork(links, movements)


def costs_from(table):
    """LinkCosts from {id: (fuel, time, distance)}."""
    return LinkCosts({k: EdgeCost(*v) for k, v in table.items()})


def random_graph(rng, n_links, p_edge=0.3):
    ids = [f"L{i:02d}" for i in range(n_links)]
    links = [Link(l, float(rng.uniform(50, 500)), 0.0, 10.0) for l in ids]
    moves = [(a, b) for a in ids for b in ids if a != b and rng.random() < p_edge]
    return RoadNetwork(links, moves)


def random_costs(rng, network, zero_prob=0.0):
    out = {}
    for lid in network.ids:
        vals = rng.uniform(0.1, 10.0, size=3)
        # integer-valued costs create exact ties, which exercise tie-breaking
        vals = np.round(vals) if rng.random() < 0.5 else vals
        vals[rng.random(3) < zero_prob] = 0.0
        out[lid] = EdgeCost(float(vals[0]), float(vals[1]), float(vals[2]))
    return LinkCosts(out)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# acceptance checks append (criterion, passed, detail) here; the terminal
# summary below prints one line per criterion
ACCEPTANCE: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
