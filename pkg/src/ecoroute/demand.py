"""Frequent origin-destination pairs from trip endpoints.

Endpoints are clustered with OPTICS (reachability ordering, then a flat cut
at a reachability threshold); trips are grouped by the clusters of their two
ends and pairs seen at least once per week survive.
"""

from __future__ import annotations

import csv
import heapq
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, ParseError, ValidationError

log = logging.getLogger(__name__)

NOISE = -1
DEFAULT_MIN_PTS = 10
DEFAULT_EPS_MAX = 300.0
DEFAULT_THRESHOLD = 150.0
DEFAULT_STUDY_WEEKS = 26
OD_COLUMNS = ["origin_cluster", "destination_cluster", "origin_link", "dest_link", "weekly_freq", "trip_count"]


@dataclass(frozen=True)
class Endpoint:
    trip_id: str
    role: str  # "origin" | "destination"
    x: float
    y: float

    def __post_init__(self):
        if self.role not in ("origin", "destination"):
            raise ValidationError(f"endpoint role must be origin or destination, got {self.role!r}")
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValidationError(f"trip {self.trip_id}: non-finite endpoint coordinate")


@dataclass
class ReachabilityOrdering:
    """OPTICS output. ``order[k]`` is a point index; the two distance arrays
    are indexed by point, not by position."""

    order: np.ndarray
    reachability: np.ndarray
    core_distance: np.ndarray

    def __len__(self):
        return len(self.order)

    def rows(self):
        """(point index, reachability, core distance) in ordering sequence."""
        return [(int(i), float(self.reachability[i]), float(self.core_distance[i])) for i in self.order]


def _canonical(points: np.ndarray) -> np.ndarray:
    # processing order: by x, then y, then input index; makes the result
    # independent of how the caller happened to order the points
    return np.lexsort((np.arange(len(points)), points[:, 1], points[:, 0]))


def optics_order(points, min_pts: int = DEFAULT_MIN_PTS, eps_max: float = DEFAULT_EPS_MAX) -> ReachabilityOrdering:
    """OPTICS reachability ordering.

    Core distance counts the point itself among its ``min_pts`` neighbours.
    Each cluster walk starts from the first unprocessed point in canonical
    (x, y, index) order; the seed queue pops the smallest reachability, ties
    going to the same canonical order.
    """
    if min_pts < 2:
        raise ConfigError(f"min_pts must be >= 2, got {min_pts}")
    if not eps_max > 0:
        raise ConfigError(f"eps_max must be > 0, got {eps_max}")
    P = np.asarray(points, float).reshape(-1, 2)
    n = len(P)
    reach = np.full(n, np.inf)
    core = np.full(n, np.inf)
    if n == 0:
        return ReachabilityOrdering(np.empty(0, int), reach, core)
    if not np.all(np.isfinite(P)):
        raise ValidationError("point coordinates must be finite")

    canon = _canonical(P)
    rank = np.empty(n, int)
    rank[canon] = np.arange(n)
    # neighbour distances are computed once, so core and reachability
    # distances agree bit for bit (they tie often, and ties are decided by rank)
    tree = cKDTree(P)
    neigh, dists = [], []
    for p, cand in enumerate(tree.query_ball_point(P, eps_max * (1 + 1e-9))):
        cand = np.asarray(cand, int)
        dd = np.hypot(P[cand, 0] - P[p, 0], P[cand, 1] - P[p, 1])
        keep = dd <= eps_max
        neigh.append(cand[keep])
        dists.append(dd[keep])
        if keep.sum() >= min_pts:
            core[p] = np.partition(dd[keep], min_pts - 1)[min_pts - 1]

    processed = np.zeros(n, bool)
    order = []

    def expand(p, seeds):
        cp = core[p]
        if not math.isfinite(cp):
            return
        for o, dd in zip(neigh[p], dists[p]):
            if processed[o]:
                continue
            r = cp if cp > dd else dd
            if r < reach[o]:
                reach[o] = r
                heapq.heappush(seeds, (r, rank[o], o))

    for start in canon:
        if processed[start]:
            continue
        processed[start] = True
        order.append(start)
        seeds: list = []
        expand(start, seeds)
        while seeds:
            r, _, q = heapq.heappop(seeds)
            if processed[q] or r > reach[q]:
                continue
            processed[q] = True
            order.append(q)
            expand(q, seeds)
    return ReachabilityOrdering(np.array(order, int), reach, core)


def extract_clusters(ordering: ReachabilityOrdering, reachability_threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Flat clusters from a reachability cut; labels per point, -1 for noise.

    Walking the ordering, a point whose reachability is below the threshold
    joins the current cluster; otherwise it opens a new cluster if its core
    distance is below the threshold and is noise if not.
    """
    if not reachability_threshold > 0:
        raise ConfigError("reachability threshold must be > 0")
    n = len(ordering.order)
    labels = np.full(n, NOISE, int)
    cid = -1
    for i in ordering.order:
        if ordering.reachability[i] < reachability_threshold and cid >= 0:
            labels[i] = cid
        elif ordering.core_distance[i] < reachability_threshold:
            cid += 1
            labels[i] = cid
    return labels


def cluster_points(
    points, min_pts: int = DEFAULT_MIN_PTS, eps_max: float = DEFAULT_EPS_MAX, threshold: float = DEFAULT_THRESHOLD
) -> np.ndarray:
    return extract_clusters(optics_order(points, min_pts, eps_max), threshold)


# --------------------------------------------------------------------------
# OD pairs


@dataclass
class OdPair:
    origin_cluster: int
    destination_cluster: int
    origin_link: str | None
    dest_link: str | None
    weekly_frequency: float
    trip_ids: tuple[str, ...]

    @property
    def trip_count(self) -> int:
        return len(self.trip_ids)


def trip_endpoints(trips, network) -> list[Endpoint]:
    """Origin and destination of each trip at its first/last link midpoint."""
    if not network.has_coords():
        raise ValidationError("links file has no x_m,y_m columns; endpoint clustering is unavailable")
    out = []
    for t in trips:
        o = network.links[t.origin_link]
        d = network.links[t.destination_link]
        out.append(Endpoint(t.trip_id, "origin", o.x, o.y))
        out.append(Endpoint(t.trip_id, "destination", d.x, d.y))
    return out


def medoid(points: np.ndarray) -> np.ndarray:
    """Member minimising the summed distance to the others (first on ties)."""
    P = np.asarray(points, float)
    if len(P) > 2000:
        # exact on a fixed subsample keeps this O(n) in memory
        P = P[np.linspace(0, len(P) - 1, 2000).astype(int)]
    d = np.hypot(P[:, None, 0] - P[None, :, 0], P[:, None, 1] - P[None, :, 1]).sum(axis=1)
    return P[int(np.argmin(d))]


def snap_to_links(xy: np.ndarray, network) -> list[str]:
    """Closest link midpoint for each point; ties go to the smaller id."""
    ids = network.ids
    mids = np.array([[network.links[l].x, network.links[l].y] for l in ids])
    tree = cKDTree(mids)
    out = []
    for p in np.atleast_2d(xy):
        dist, _ = tree.query(p)
        cand = tree.query_ball_point(p, dist * (1 + 1e-12) + 1e-9)
        out.append(ids[min(cand)])
    return out


def identify_od_pairs(
    endpoints: Sequence[Endpoint],
    labels: Sequence[int],
    study_weeks: int,
    network=None,
) -> list[OdPair]:
    """Pairs of endpoint clusters travelled at least once per week.

    ``labels[k]`` is the cluster of ``endpoints[k]``. Trips with a noise end
    are skipped. With a network carrying coordinates, each cluster is
    represented by the link whose midpoint is closest to its medoid.
    """
    if study_weeks < 1:
        raise ConfigError(f"study_weeks must be >= 1, got {study_weeks}")
    if len(labels) != len(endpoints):
        raise ValidationError("one label per endpoint required")
    ends: dict[str, dict[str, int]] = defaultdict(dict)
    members: dict[int, list[int]] = defaultdict(list)
    for k, (e, lab) in enumerate(zip(endpoints, labels)):
        ends[e.trip_id][e.role] = int(lab)
        if lab != NOISE:
            members[int(lab)].append(k)
    groups: dict[tuple[int, int], list[str]] = defaultdict(list)
    for tid, roles in ends.items():
        o, d = roles.get("origin", NOISE), roles.get("destination", NOISE)
        if o == NOISE or d == NOISE:
            continue
        groups[(o, d)].append(tid)

    kept = {key: sorted(tids) for key, tids in groups.items() if len(tids) >= study_weeks}
    rep: dict[int, str] = {}
    if network is not None and network.has_coords() and kept:
        needed = sorted({c for key in kept for c in key})
        xy = np.array([[endpoints[k].x, endpoints[k].y] for k in range(len(endpoints))])
        centres = np.array([medoid(xy[members[c]]) for c in needed])
        rep = dict(zip(needed, snap_to_links(centres, network)))
    pairs = [
        OdPair(o, d, rep.get(o), rep.get(d), len(tids) / study_weeks, tuple(tids))
        for (o, d), tids in sorted(kept.items())
    ]
    log.info("%d OD pairs kept of %d candidate pairs", len(pairs), len(groups))
    return pairs


def write_od_pairs(pairs: Iterable[OdPair], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OD_COLUMNS)
        for p in pairs:
            w.writerow(
                [p.origin_cluster, p.destination_cluster, p.origin_link or "", p.dest_link or "", repr(p.weekly_frequency), p.trip_count]
            )


def read_od_pairs(path) -> list[OdPair]:
    path = Path(path)
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ("origin_link", "dest_link") if c not in (reader.fieldnames or [])]
        if missing:
            raise ParseError(path, 1, f"missing column(s): {', '.join(missing)}")
        for row in reader:
            try:
                freq = float(row.get("weekly_freq") or 1.0)
                count = int(row.get("trip_count") or 0)
                oc = int(row.get("origin_cluster") or -1)
                dc = int(row.get("destination_cluster") or -1)
            except ValueError as exc:
                raise ParseError(path, reader.line_num, str(exc)) from None
            o, d = row["origin_link"].strip(), row["dest_link"].strip()
            if not o or not d:
                raise ParseError(path, reader.line_num, "empty origin_link or dest_link")
            out.append(OdPair(oc, dc, o, d, freq, tuple(f"#{k}" for k in range(count))))
    return out
