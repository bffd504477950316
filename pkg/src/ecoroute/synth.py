"""Synthetic networks, 1 Hz speed traces and ground-truth fuel.

The fuel oracle is a road-load + Willans-line model: tractive power from
inertia, grade, aerodynamic drag and rolling resistance, and a fuel rate that
is affine in positive power with a constant idle floor. Braking power is
clipped at zero, never refunded.

Every generator is a pure function of its arguments and seed.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .ingest import LinkTraversal, Trip
from .network import Link, RoadNetwork
from .vehicle import SPEED_LIMITS, VehicleParams, tractive_power

__all__ = [
    "SPEED_LIMITS",
    "VehicleParams",
    "SpeedProfile",
    "fuel_oracle",
    "generate_grid_network",
    "simulate_traversal",
    "generate_corpus",
    "generate_link_corpus",
    "generate_demand_points",
]


@dataclass
class SpeedProfile:
    """Speed samples at a fixed step; ``len(v) - 1`` intervals."""

    v: np.ndarray
    dt: float = 1.0
    t0: float = 0.0

    def __post_init__(self):
        self.v = np.asarray(self.v, float)
        if self.v.ndim != 1 or len(self.v) == 0:
            raise ValidationError("speed profile must be a nonempty 1-D sequence")
        if not np.all(np.isfinite(self.v)) or np.any(self.v < 0):
            raise ValidationError("speed profile must be finite and nonnegative")

    @property
    def t(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self.v))

    @property
    def duration(self) -> float:
        return self.dt * (len(self.v) - 1)

    @property
    def distance(self) -> float:
        return float(0.5 * (self.v[1:] + self.v[:-1]).sum() * self.dt)


def fuel_oracle(profile: SpeedProfile, link: Link, params: VehicleParams = VehicleParams()) -> float:
    """Ground-truth fuel (kg) for driving ``profile`` over ``link``.

    Each interval uses its mean speed and finite-difference acceleration.
    """
    v = profile.v
    if len(v) < 2:
        return 0.0
    dt = profile.dt
    v_mid = 0.5 * (v[1:] + v[:-1])
    acc = np.diff(v) / dt
    power = tractive_power(v_mid, acc, link.grade, params)
    rate = params.idle_fuel_rate + params.willans_slope_si * np.maximum(power, 0.0)
    return float(rate.sum() * dt)


# --------------------------------------------------------------------------
# networks


# grades are N(0, grade_sd^2) on every street by default; TERRAIN_BY_LIMIT
# is an opt-in profile where engineered high-speed roads are flatter
DEFAULT_GRADE_SCALE: dict[float, float] = {}
TERRAIN_BY_LIMIT = {11.18: 1.4, 15.65: 1.0, 20.12: 0.6, 24.59: 0.4, 29.06: 0.3}


def generate_grid_network(
    rows: int,
    cols: int,
    seed: int,
    block_range: tuple[float, float] = (150.0, 450.0),
    grade_sd: float = 0.02,
    grade_clip: float = 0.08,
    grade_scale_by_limit: dict[float, float] | None = None,
) -> RoadNetwork:
    """Rectangular grid of ``rows x cols`` intersections.

    Every street segment becomes two opposing directed links. Each row and
    each column street gets one speed limit; block spacings vary per gap.
    Grades are drawn per segment and negated for the opposing link;
    ``grade_scale_by_limit`` optionally multiplies ``grade_sd`` per limit. All movements except U-turns are permitted.
    """
    if rows < 2 or cols < 2:
        raise ValidationError("grid needs at least 2 rows and 2 columns")
    rng = np.random.default_rng(seed)
    xs = np.concatenate([[0.0], np.cumsum(rng.uniform(*block_range, size=cols - 1))])
    ys = np.concatenate([[0.0], np.cumsum(rng.uniform(*block_range, size=rows - 1))])
    row_limit = rng.choice(SPEED_LIMITS, size=rows)
    col_limit = rng.choice(SPEED_LIMITS, size=cols)

    def node(r, c):
        return r * cols + c

    segments = []  # (u, v, length, limit)
    for r in range(rows):
        for c in range(cols - 1):
            segments.append((node(r, c), node(r, c + 1), xs[c + 1] - xs[c], row_limit[r]))
    for c in range(cols):
        for r in range(rows - 1):
            segments.append((node(r, c), node(r + 1, c), ys[r + 1] - ys[r], col_limit[c]))
    scale_map = DEFAULT_GRADE_SCALE if grade_scale_by_limit is None else grade_scale_by_limit
    scale = np.array([scale_map.get(float(lim), 1.0) for *_, lim in segments])
    grades = np.clip(rng.normal(0.0, grade_sd, size=len(segments)) * scale, -grade_clip, grade_clip)

    width = len(str(2 * len(segments)))
    links = []
    out_of: dict[int, list[tuple[str, int]]] = {}
    into: dict[int, list[tuple[str, int]]] = {}
    for s, ((u, v, length, limit), g) in enumerate(zip(segments, grades)):
        fwd, bwd = f"L{2 * s:0{width}d}", f"L{2 * s + 1:0{width}d}"
        ru, cu = divmod(u, cols)
        rv, cv = divmod(v, cols)
        mx, my = 0.5 * (xs[cu] + xs[cv]), 0.5 * (ys[ru] + ys[rv])
        links.append(Link(fwd, float(length), float(g), float(limit), bwd, float(mx), float(my)))
        links.append(Link(bwd, float(length), float(-g), float(limit), fwd, float(mx), float(my)))
        out_of.setdefault(u, []).append((fwd, v))
        into.setdefault(v, []).append((fwd, u))
        out_of.setdefault(v, []).append((bwd, u))
        into.setdefault(u, []).append((bwd, v))

    movements = []
    for n, incoming in into.items():
        for in_link, came_from in incoming:
            for out_link, goes_to in out_of.get(n, []):
                if goes_to != came_from:
                    movements.append((in_link, out_link))
    return RoadNetwork(links, movements)


# --------------------------------------------------------------------------
# traversals


def _speed_trace(cruise, amp, period, phase, noise_sd, n, rng):
    t = np.arange(n, dtype=float)
    v = cruise + amp * np.sin(2 * math.pi * t / period + phase) + noise_sd * rng.standard_normal(n)
    return np.maximum(v, 0.0)


# relative stop-and-go amplitude under congestion; local streets oscillate most
STOP_GO_BY_LIMIT = {11.18: 1.0, 15.65: 0.7, 20.12: 0.5, 24.59: 0.35, 29.06: 0.25}

_DECEL = 2.5  # m/s^2
_ACCEL = 1.5
_CALMING_FLOOR = 0.2  # speed-hump / stop-sign dip as a fraction of cruise


def _dip(t, start, depth, decel_s, hold_s, accel_s):
    # multiplier ramping from 1 down to 1 - depth, holding, then back to 1
    e = np.ones_like(t)
    bottom = start + decel_s
    up_at = bottom + hold_s
    down = (t >= start) & (t < bottom)
    e[down] = 1.0 - depth * (t[down] - start) / decel_s
    e[(t >= bottom) & (t < up_at)] = 1.0 - depth
    up = (t >= up_at) & (t < up_at + accel_s)
    e[up] = 1.0 - depth * (1.0 - (t[up] - up_at) / accel_s)
    return e


def simulate_profile(
    link: Link,
    congestion: float,
    rng: np.random.Generator,
    stop_dwell: float = 0.0,
    calming: int = 0,
    period: float | None = None,
) -> SpeedProfile:
    """1 Hz speed trace covering exactly ``link.length`` metres.

    Free flow cruises near the limit with small ripples; heavy congestion
    cruises near 0.3 of the limit with stop-and-go oscillation. A positive
    ``stop_dwell`` adds one full stop (a red light) of that many seconds past
    the first third of the link. ``calming`` adds that many brief slowdowns
    (speed humps, stop signs) spread evenly along the link. ``period`` fixes
    the stop-and-go cycle length in seconds (drawn from U(15, 30) if None).
    """
    c = min(max(float(congestion), 0.0), 1.0)
    vl = link.speed_limit
    cruise = vl * (0.93 - 0.65 * c) * min(max(1.0 + 0.03 * rng.standard_normal(), 0.95), 1.04)
    amp = cruise * (0.04 + 0.96 * c * STOP_GO_BY_LIMIT.get(vl, 0.6)) * rng.uniform(0.8, 1.0)
    drawn = rng.uniform(15.0, 30.0)  # always consumed so the stream is stable
    period = drawn if period is None else float(period)
    phase = rng.uniform(0.0, 2 * math.pi)
    noise_sd = 0.01 * vl
    nominal = link.length / cruise
    dips = []
    for i in range(int(calming)):
        depth = 1.0 - _CALMING_FLOOR
        dips.append(((i + 1) / (calming + 1) * nominal, depth, depth * cruise / _DECEL, 1.0, depth * cruise / _ACCEL))
    if stop_dwell > 0:
        dips.append((rng.uniform(0.35, 0.85) * nominal, 1.0, cruise / _DECEL, float(stop_dwell), cruise / _ACCEL))
    n = int(math.ceil(1.6 * nominal + sum(d[3] + d[4] for d in dips))) + 3
    while True:
        v = _speed_trace(cruise, amp, period, phase, noise_sd, n, rng)
        t = np.arange(n, dtype=float)
        for d in dips:
            v = v * _dip(t, *d)
        dist = np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] + v[:-1]))])
        hit = np.flatnonzero(dist >= link.length)
        if hit.size:
            end = max(int(hit[0]), 1)
            v = v[: end + 1] * (link.length / dist[end])
            return SpeedProfile(v)
        n *= 2


def simulate_traversal(
    link: Link,
    congestion_level: float,
    seed,
    params: VehicleParams = VehicleParams(),
    trip_id: str = "T0",
    seq: int = 0,
    entry_time: float = 0.0,
    stop_dwell: float = 0.0,
    calming: int = 0,
    period: float | None = None,
) -> tuple[SpeedProfile, LinkTraversal]:
    rng = np.random.default_rng(seed)
    profile = simulate_profile(link, congestion_level, rng, stop_dwell, calming, period)
    profile.t0 = entry_time
    duration = profile.duration
    trav = LinkTraversal(
        trip_id=trip_id,
        seq=seq,
        link_id=link.link_id,
        entry_time=entry_time,
        exit_time=entry_time + duration,
        entry_speed=float(profile.v[0]),
        exit_speed=float(profile.v[-1]),
        avg_speed=link.length / duration,
        fuel=fuel_oracle(profile, link, params),
    )
    return profile, trav


# --------------------------------------------------------------------------
# corpora


@dataclass(frozen=True)
class LinkTraits:
    """Hidden per-link traffic character (never exposed as a feature)."""

    congestion: float
    stop_prob: float
    red_dwell: float
    calming: int


@dataclass(frozen=True)
class Conditions:
    congestion: float
    stop_dwell: float
    calming: int


@dataclass
class CongestionModel:
    """Per-traversal traffic draws.

    Each link gets hidden traits: a base congestion level, a signal (stop
    probability and typical red dwell) and a count of traffic-calming
    slowdowns. Traversals scatter around the base level. Everything that
    varies the speed trace is strongest on the lowest speed-limit category,
    since slow urban streets see the most stop-and-go variation.
    """

    base_low: float = 0.1
    base_high: float = 0.6
    spread_by_limit: dict[float, float] = field(
        default_factory=lambda: {11.18: 0.50, 15.65: 0.25, 20.12: 0.2, 24.59: 0.16, 29.06: 0.12}
    )
    default_spread: float = 0.2
    dwell_low: float = 5.0
    dwell_high: float = 50.0
    stop_max_by_limit: dict[float, float] = field(
        default_factory=lambda: {11.18: 0.9, 15.65: 0.5, 20.12: 0.25, 24.59: 0.08, 29.06: 0.0}
    )
    default_stop_max: float = 0.2
    calming_max_by_limit: dict[float, int] = field(default_factory=lambda: {11.18: 3})

    def link_traits(self, network: RoadNetwork, rng) -> dict[str, LinkTraits]:
        out = {}
        for lid in network.ids:
            limit = network.links[lid].speed_limit
            top = self.stop_max_by_limit.get(limit, self.default_stop_max)
            out[lid] = LinkTraits(
                congestion=float(rng.uniform(self.base_low, self.base_high)),
                stop_prob=float(rng.uniform(0.0, top)),
                red_dwell=float(rng.uniform(self.dwell_low, self.dwell_high)),
                calming=int(rng.integers(0, self.calming_max_by_limit.get(limit, 0) + 1)),
            )
        return out

    def draw(self, traits: LinkTraits, limit: float, rng) -> Conditions:
        spread = self.spread_by_limit.get(limit, self.default_spread)
        level = float(np.clip(traits.congestion + spread * rng.standard_normal(), 0.0, 1.0))
        stopped = rng.random() < traits.stop_prob
        dwell = traits.red_dwell * rng.uniform(0.7, 1.3) if stopped else 0.0
        return Conditions(level, float(dwell), traits.calming)


def _hop_path(network: RoadNetwork, src: int, dst: int) -> list[int] | None:
    prev = {src: -1}
    q = deque([src])
    while q:
        u = q.popleft()
        if u == dst:
            break
        for v in network.succ[u]:
            if v not in prev:
                prev[v] = u
                q.append(v)
    if dst not in prev:
        return None
    path = [dst]
    while path[-1] != src:
        path.append(prev[path[-1]])
    return path[::-1]


def _random_walk(network: RoadNetwork, start: int, n_links: int, rng) -> list[int]:
    path = [start]
    while len(path) < n_links:
        nxt = network.succ[path[-1]]
        if not nxt:
            break
        path.append(nxt[int(rng.integers(len(nxt)))])
    return path


# stream tags keep the per-purpose random streams independent
_TRAVERSAL, _TRIP_CONGESTION, _LINK_CONGESTION = 0, 1, 2


def _link_seed(seed: int, trip_no: int, seq: int, stream: int = _TRAVERSAL) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, stream, trip_no, seq])


def simulate_trip(
    network: RoadNetwork,
    path: list[int],
    trip_id: str,
    trip_no: int,
    seed: int,
    congestion: CongestionModel,
    traits: dict[str, LinkTraits],
    params: VehicleParams,
) -> Trip:
    rng = np.random.default_rng(_link_seed(seed, trip_no, 0, _TRIP_CONGESTION))
    t = 0.0
    travs = []
    for seq, li in enumerate(path):
        link = network.links[network.ids[li]]
        cond = congestion.draw(traits[link.link_id], link.speed_limit, rng)
        _, trav = simulate_traversal(
            link, cond.congestion, _link_seed(seed, trip_no, seq), params, trip_id, seq, t, cond.stop_dwell, cond.calming
        )
        t = trav.exit_time
        travs.append(trav)
    return Trip.from_traversals(trip_id, travs, network)


def generate_corpus(
    network: RoadNetwork,
    trips_per_link: float,
    seed: int,
    walk_links: tuple[int, int] = (25, 45),
    od_pairs: int = 0,
    od_trips: int = 40,
    od_radius: float = 120.0,
    congestion: CongestionModel | None = None,
    params: VehicleParams = VehicleParams(),
) -> list[Trip]:
    """Trips over ``network``: random walks plus optional planted OD demand.

    Random walks are sized so each link is traversed about ``trips_per_link``
    times on average. Planted OD pairs pick an origin and a destination area;
    each of their ``od_trips`` trips starts at a link within ``od_radius`` of
    the origin centre and follows a fewest-links path to a link near the
    destination centre. Planted trips are not padded to pass the trip filters.
    """
    congestion = congestion or CongestionModel()
    rng = np.random.default_rng(seed)
    traits = congestion.link_traits(network, rng)
    n = len(network)
    mean_len = 0.5 * (walk_links[0] + walk_links[1])
    n_walks = int(math.ceil(trips_per_link * n / mean_len))
    paths: list[list[int]] = []
    for _ in range(n_walks):
        start = int(rng.integers(n))
        paths.append(_random_walk(network, start, int(rng.integers(walk_links[0], walk_links[1] + 1)), rng))

    if od_pairs:
        if not network.has_coords():
            raise ValidationError("planted OD demand needs link coordinates")
        xy = np.array([[network.links[l].x, network.links[l].y] for l in network.ids])
        for _ in range(od_pairs):
            for _attempt in range(100):
                o_c, d_c = xy[rng.integers(n)], xy[rng.integers(n)]
                o_near = np.flatnonzero(np.hypot(*(xy - o_c).T) <= od_radius)
                d_near = np.flatnonzero(np.hypot(*(xy - d_c).T) <= od_radius)
                if np.hypot(*(o_c - d_c)) > 6 * od_radius:
                    break
            for _ in range(od_trips):
                o = int(rng.choice(o_near))
                d = int(rng.choice(d_near))
                path = _hop_path(network, o, d)
                if path is not None:
                    paths.append(path)

    width = len(str(len(paths)))
    return [
        simulate_trip(network, p, f"T{i:0{width}d}", i, seed, congestion, traits, params) for i, p in enumerate(paths)
    ]


def generate_link_corpus(
    network: RoadNetwork,
    link_ids: list[str],
    per_link: int,
    seed: int,
    congestion: CongestionModel | None = None,
    params: VehicleParams = VehicleParams(),
) -> list[LinkTraversal]:
    """Independent traversals of individual links (no trip structure).

    Used for model fitting benchmarks where every link needs a fixed number of
    samples.
    """
    congestion = congestion or CongestionModel()
    rng = np.random.default_rng(seed)
    traits = congestion.link_traits(network, rng)
    out = []
    for j, lid in enumerate(link_ids):
        link = network.links[lid]
        lrng = np.random.default_rng(_link_seed(seed, j, 0, _LINK_CONGESTION))
        for s in range(per_link):
            cond = congestion.draw(traits[lid], link.speed_limit, lrng)
            _, trav = simulate_traversal(
                link, cond.congestion, _link_seed(seed, j, s), params, f"{lid}-{s}", 0, 0.0, cond.stop_dwell, cond.calming
            )
            out.append(trav)
    return out


def generate_demand_points(
    n_pairs: int,
    trips_per_pair: tuple[int, int],
    n_noise: int,
    seed: int,
    extent: float = 20000.0,
    blob_sd: float = 30.0,
    min_separation: float = 2000.0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Planted OD demand in a square plane.

    Returns (origins, destinations, pair_label, is_noise). ``pair_label`` is
    the planted pair index or -1 for uniform noise trips.
    """
    rng = np.random.default_rng(seed)
    centres: list[np.ndarray] = []
    while len(centres) < 2 * n_pairs:
        c = rng.uniform(0, extent, size=2)
        if all(np.hypot(*(c - o)) >= min_separation for o in centres):
            centres.append(c)
    origins, dests, labels = [], [], []
    for p in range(n_pairs):
        k = int(rng.integers(trips_per_pair[0], trips_per_pair[1] + 1))
        origins.append(centres[2 * p] + blob_sd * rng.standard_normal((k, 2)))
        dests.append(centres[2 * p + 1] + blob_sd * rng.standard_normal((k, 2)))
        labels.append(np.full(k, p))
    origins.append(rng.uniform(0, extent, size=(n_noise, 2)))
    dests.append(rng.uniform(0, extent, size=(n_noise, 2)))
    labels.append(np.full(n_noise, -1))
    o, d, lab = np.vstack(origins), np.vstack(dests), np.concatenate(labels)
    perm = rng.permutation(len(lab))
    return o[perm], d[perm], lab[perm], lab[perm] < 0
