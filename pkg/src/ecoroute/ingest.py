"""Trip traversal parsing, trip filters, motion features and historical link speeds."""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import vbgmm
from .errors import InsufficientDataError, ParseError, ValidationError
from .fuel import MotionFeatures
from .network import Link, RoadNetwork

log = logging.getLogger(__name__)

TRAVERSAL_COLUMNS = [
    "trip_id",
    "seq",
    "link_id",
    "entry_time_s",
    "exit_time_s",
    "entry_speed_mps",
    "exit_speed_mps",
    "avg_speed_mps",
    "fuel_kg",
]
REQUIRED_COLUMNS = TRAVERSAL_COLUMNS[:7]

MIN_SPEED_SAMPLES = 20
SPEED_VAR_FLOOR = 1e-4


@dataclass(frozen=True)
class LinkTraversal:
    trip_id: str
    seq: int
    link_id: str
    entry_time: float
    exit_time: float
    entry_speed: float
    exit_speed: float
    avg_speed: float | None = None
    fuel: float | None = None

    def __post_init__(self):
        if not self.exit_time > self.entry_time:
            raise ValidationError(f"trip {self.trip_id} seq {self.seq}: exit_time must exceed entry_time")
        if self.entry_speed < 0 or self.exit_speed < 0:
            raise ValidationError(f"trip {self.trip_id} seq {self.seq}: negative speed")
        if self.avg_speed is not None and self.avg_speed < 0:
            raise ValidationError(f"trip {self.trip_id} seq {self.seq}: negative average speed")
        if self.fuel is not None and self.fuel < 0:
            raise ValidationError(f"trip {self.trip_id} seq {self.seq}: negative fuel")

    @property
    def dwell(self) -> float:
        return self.exit_time - self.entry_time


@dataclass
class Trip:
    trip_id: str
    traversals: list[LinkTraversal]
    total_duration: float
    total_distance: float

    @classmethod
    def from_traversals(cls, trip_id, traversals: Sequence[LinkTraversal], network: RoadNetwork | None = None):
        travs = list(traversals)
        duration = travs[-1].exit_time - travs[0].entry_time if travs else 0.0
        if network is not None:
            distance = sum(network.links[t.link_id].length for t in travs)
        else:
            distance = sum((t.avg_speed or 0.0) * t.dwell for t in travs)
        return cls(trip_id, travs, duration, distance)

    @property
    def origin_link(self) -> str:
        return self.traversals[0].link_id

    @property
    def destination_link(self) -> str:
        return self.traversals[-1].link_id


@dataclass
class TripFilters:
    """Trip-level query filters; a trip must be strictly longer than both minimums.

    ``bbox`` is (xmin, ymin, xmax, ymax) in the links file's planar frame and
    needs link coordinates. ``hours``/``weekdays_only`` apply only when the
    traversal file carries an ``epoch_s`` column (UTC, trip start).
    """

    min_duration: float = 600.0
    min_distance: float = 300.0
    bbox: tuple[float, float, float, float] | None = None
    hours: tuple[int, int] | None = None
    weekdays_only: bool = False


class TripSet(list):
    """List of trips plus bookkeeping of what was dropped and why."""

    def __init__(self, trips=(), dropped: Counter | None = None, rejected: dict | None = None):
        super().__init__(trips)
        self.dropped: Counter = dropped if dropped is not None else Counter()
        self.rejected: dict[str, str] = rejected if rejected is not None else {}

    def traversals(self) -> list[LinkTraversal]:
        return [t for trip in self for t in trip.traversals]


def _opt_float(path, line, row, col):
    raw = row.get(col)
    if raw is None or raw.strip() == "":
        return None
    try:
        val = float(raw)
    except ValueError:
        raise ParseError(path, line, f"column {col!r}: not a number: {raw!r}") from None
    if not math.isfinite(val):
        raise ParseError(path, line, f"column {col!r}: non-finite value")
    return val


def read_traversals(trips_file) -> tuple[list[LinkTraversal], dict[str, float]]:
    """Parse the traversals CSV. Returns (traversals in file order, trip start epochs)."""
    path = Path(trips_file)
    out = []
    epochs: dict[str, float] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise ParseError(path, 1, f"missing columns {missing}")
        for row in reader:
            line = reader.line_num
            trip_id = (row["trip_id"] or "").strip()
            link_id = (row["link_id"] or "").strip()
            if not trip_id or not link_id:
                raise ParseError(path, line, "empty trip_id or link_id")
            try:
                seq = int(row["seq"])
            except (TypeError, ValueError):
                raise ParseError(path, line, f"seq is not an integer: {row['seq']!r}") from None
            vals = {}
            for col in REQUIRED_COLUMNS[3:]:
                v = _opt_float(path, line, row, col)
                if v is None:
                    raise ParseError(path, line, f"column {col!r} is required")
                vals[col] = v
            try:
                out.append(
                    LinkTraversal(
                        trip_id,
                        seq,
                        link_id,
                        vals["entry_time_s"],
                        vals["exit_time_s"],
                        vals["entry_speed_mps"],
                        vals["exit_speed_mps"],
                        _opt_float(path, line, row, "avg_speed_mps"),
                        _opt_float(path, line, row, "fuel_kg"),
                    )
                )
            except ValidationError as exc:
                raise ParseError(path, line, str(exc)) from None
            ep = _opt_float(path, line, row, "epoch_s")
            if ep is not None:
                epochs.setdefault(trip_id, ep)
    return out, epochs


def group_trips(traversals: Iterable[LinkTraversal], network: RoadNetwork | None = None):
    """Group traversals into trips. Returns (trips, rejected {trip_id: reason})."""
    by_trip: dict[str, list[LinkTraversal]] = {}
    for t in traversals:
        by_trip.setdefault(t.trip_id, []).append(t)
    trips, rejected = [], {}
    for trip_id, travs in by_trip.items():
        seqs = [t.seq for t in travs]
        if any(b <= a for a, b in zip(seqs, seqs[1:])):
            rejected[trip_id] = "non-monotone seq"
            continue
        if network is not None:
            unknown = [t.link_id for t in travs if t.link_id not in network]
            if unknown:
                rejected[trip_id] = f"unknown link {unknown[0]}"
                continue
            idx = network.index
            if any(idx[b.link_id] not in network.succ[idx[a.link_id]] for a, b in zip(travs, travs[1:])):
                rejected[trip_id] = "consecutive links not connected by a movement"
                continue
        trips.append(Trip.from_traversals(trip_id, travs, network))
    return trips, rejected


def _in_bbox(trip: Trip, network: RoadNetwork, bbox) -> bool:
    xmin, ymin, xmax, ymax = bbox
    for t in trip.traversals:
        link = network.links[t.link_id]
        if not link.has_coords:
            raise ValidationError("bounding-box filter needs link coordinates")
        if not (xmin <= link.x <= xmax and ymin <= link.y <= ymax):
            return False
    return True


def apply_filters(
    trips: Iterable[Trip],
    filters: TripFilters,
    network: RoadNetwork | None = None,
    epochs: Mapping[str, float] | None = None,
) -> TripSet:
    kept = []
    dropped: Counter = Counter()
    for trip in trips:
        if not trip.total_duration > filters.min_duration:
            dropped["duration"] += 1
            continue
        if not trip.total_distance > filters.min_distance:
            dropped["distance"] += 1
            continue
        if filters.bbox is not None and network is not None and not _in_bbox(trip, network, filters.bbox):
            dropped["bbox"] += 1
            continue
        if epochs and trip.trip_id in epochs and (filters.hours or filters.weekdays_only):
            start = datetime.fromtimestamp(epochs[trip.trip_id], tz=timezone.utc)
            if filters.weekdays_only and start.weekday() >= 5:
                dropped["weekday"] += 1
                continue
            if filters.hours and not (filters.hours[0] <= start.hour < filters.hours[1]):
                dropped["hour"] += 1
                continue
        kept.append(trip)
    return TripSet(kept, dropped)


def load_trips(trips_file, filters: TripFilters | None = None, network: RoadNetwork | None = None) -> TripSet:
    """Read, group and filter trips; drop counts land on ``result.dropped``."""
    filters = filters or TripFilters()
    travs, epochs = read_traversals(trips_file)
    trips, rejected = group_trips(travs, network)
    for trip_id, reason in rejected.items():
        log.warning("trip %s rejected: %s", trip_id, reason)
    result = apply_filters(trips, filters, network, epochs)
    result.rejected = rejected
    if result.dropped:
        log.info("trip filter drops: %s", dict(sorted(result.dropped.items())))
    return result


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def write_traversals(trips: Iterable[Trip], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAVERSAL_COLUMNS)
        for trip in trips:
            for t in trip.traversals:
                w.writerow(
                    [
                        t.trip_id,
                        t.seq,
                        t.link_id,
                        _fmt(t.entry_time),
                        _fmt(t.exit_time),
                        _fmt(t.entry_speed),
                        _fmt(t.exit_speed),
                        _fmt(t.avg_speed),
                        _fmt(t.fuel),
                    ]
                )


# --------------------------------------------------------------------------
# features


def compute_features(traversal: LinkTraversal, link: Link) -> MotionFeatures:
    if traversal.link_id != link.link_id:
        raise ValidationError(f"traversal is on {traversal.link_id}, link is {link.link_id}")
    if traversal.avg_speed is not None:
        avg = traversal.avg_speed
    else:
        dwell = traversal.exit_time - traversal.entry_time
        if not dwell > 0:
            raise ValidationError(f"trip {traversal.trip_id} seq {traversal.seq}: zero dwell and no average speed")
        avg = link.length / dwell
    return MotionFeatures(
        avg_speed=avg,
        speed_change=traversal.exit_speed - traversal.entry_speed,
        grade=link.grade,
        length=link.length,
        speed_limit=link.speed_limit,
    )


def feature_samples(traversals: Iterable[LinkTraversal], network: RoadNetwork):
    """(MotionFeatures, fuel) pairs for traversals that carry fuel."""
    out = []
    for t in traversals:
        if t.fuel is None:
            continue
        out.append((compute_features(t, network.links[t.link_id]), t.fuel))
    return out


# --------------------------------------------------------------------------
# historical link speeds


@dataclass
class LinkSpeedModel:
    link_id: str
    mixture: vbgmm.GaussianMixture

    def __post_init__(self):
        m = self.mixture
        if m.dim != 1:
            raise ValidationError("link speed model must be one-dimensional")
        if abs(m.weights.sum() - 1.0) > 1e-9 or np.any(m.covariances <= 0):
            raise ValidationError("invalid speed mixture")

    @property
    def means(self) -> np.ndarray:
        return self.mixture.means[:, 0]

    def prior_mean(self) -> float:
        return float(self.mixture.weights @ self.means)


def fit_link_speed_model(samples, max_components: int = 3, link_id: str = "", seed: int = 0) -> LinkSpeedModel:
    """1-D speed mixture for one link.

    Fewer than 20 samples fall back to a single Gaussian; all-identical
    samples give one component with the variance floor.
    """
    v = np.asarray(samples, float).ravel()
    if v.size == 0:
        raise InsufficientDataError(f"link {link_id}: no speed samples")
    if not np.all(np.isfinite(v)):
        raise ValidationError(f"link {link_id}: non-finite speed sample")
    spread = float(v.var())
    if v.size < MIN_SPEED_SAMPLES or spread <= SPEED_VAR_FLOOR:
        mix = vbgmm.GaussianMixture([1.0], [[v.mean()]], [[[max(spread, SPEED_VAR_FLOOR)]]])
        return LinkSpeedModel(link_id, mix)
    hyper = vbgmm.VbHyperparams(k_max=max_components)
    post = vbgmm.fit(v[:, None], hyper, seed=seed)
    mix = vbgmm.expected_mixture(post)
    covs = np.maximum(mix.covariances, SPEED_VAR_FLOOR)
    return LinkSpeedModel(link_id, vbgmm.GaussianMixture(mix.weights, mix.means, covs))


def window_mixing_posterior(model: LinkSpeedModel, window_samples) -> np.ndarray:
    """c_k proportional to the summed component posteriors of the window samples."""
    v = np.asarray(window_samples, float).reshape(-1, 1)
    mix = model.mixture
    if v.size == 0:
        return mix.weights.copy()
    with np.errstate(divide="ignore"):
        lw = mix.component_log_pdf(v) + np.log(mix.weights)
    lw -= lw.max(axis=1, keepdims=True)
    w = np.exp(lw)
    w /= w.sum(axis=1, keepdims=True)
    c = w.sum(axis=0)
    return c / c.sum()


def estimate_window_speed(model: LinkSpeedModel, window_samples) -> float:
    """Expected speed under the window-conditioned mixing weights."""
    c = window_mixing_posterior(model, window_samples)
    return float(c @ model.means)


@dataclass
class HistoricalSpeeds:
    """Per-link speed estimates; links without data carry the posted limit."""

    speed: dict[str, float]
    imputed: set[str] = field(default_factory=set)

    def __getitem__(self, link_id):
        return self.speed[link_id]

    def to_rows(self):
        return [(lid, self.speed[lid], int(lid in self.imputed)) for lid in sorted(self.speed)]


def historical_speeds(
    network: RoadNetwork,
    traversals: Iterable[LinkTraversal],
    in_window: Callable[[LinkTraversal], bool] | None = None,
    max_components: int = 3,
    workers: int = 1,
    seed: int = 0,
) -> HistoricalSpeeds:
    """Window-conditioned expected speed per link.

    The mixture is fitted on all of a link's traversals; the window
    traversals (all of them when ``in_window`` is None) reweight its mixing
    coefficients.
    """
    all_v: dict[str, list[float]] = {}
    win_v: dict[str, list[float]] = {}
    for t in traversals:
        link = network.links[t.link_id]
        f = compute_features(t, link)
        all_v.setdefault(t.link_id, []).append(f.avg_speed)
        if in_window is None or in_window(t):
            win_v.setdefault(t.link_id, []).append(f.avg_speed)

    def one(lid):
        model = fit_link_speed_model(all_v[lid], max_components, lid, seed)
        return lid, estimate_window_speed(model, win_v.get(lid, []))

    covered = sorted(all_v)
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(one, covered))
    else:
        results = [one(lid) for lid in covered]
    speed = dict(results)
    imputed = set()
    for lid in network.ids:
        if lid not in speed:
            speed[lid] = network.links[lid].speed_limit
            imputed.add(lid)
    return HistoricalSpeeds(speed, imputed)


def write_speeds(speeds: HistoricalSpeeds, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["link_id", "speed_mps", "imputed"])
        for lid, v, imp in speeds.to_rows():
            w.writerow([lid, repr(float(v)), imp])


def read_speeds(path) -> HistoricalSpeeds:
    path = Path(path)
    speed, imputed = {}, set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            try:
                v = float(row["speed_mps"])
            except (KeyError, TypeError, ValueError):
                raise ParseError(path, reader.line_num, "bad speed_mps") from None
            speed[row["link_id"]] = v
            if row.get("imputed", "0").strip() == "1":
                imputed.add(row["link_id"])
    return HistoricalSpeeds(speed, imputed)
