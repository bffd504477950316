"""Road network model and the link-expanded routing graph.

Links are the nodes of the routing graph; a permitted movement from one link
onto the next is a directed edge. U-turns (moving onto the opposing directed
link) are never allowed.

Internally every link gets a dense integer index in ``link_id`` sort order so
the router can work on plain lists. Because the index order equals the id
order, comparing indices is the same as comparing ids (used for
deterministic tie-breaking).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from .errors import NotFoundError, ParseError, ValidationError

log = logging.getLogger(__name__)

LINK_COLUMNS = ["link_id", "length_m", "grade_rad", "speed_limit_mps", "reverse_of"]
COORD_COLUMNS = ["x_m", "y_m"]
MOVEMENT_COLUMNS = ["from_link", "to_link"]

MAX_ABS_GRADE = 0.3


@dataclass(frozen=True)
class Link:
    link_id: str
    length: float
    grade: float
    speed_limit: float
    reverse_of: str | None = None
    # planar midpoint, only needed for demand clustering
    x: float | None = None
    y: float | None = None

    def __post_init__(self):
        if not (self.length > 0 and math.isfinite(self.length)):
            raise ValidationError(f"link {self.link_id}: length must be > 0, got {self.length}")
        if not abs(self.grade) < MAX_ABS_GRADE:
            raise ValidationError(f"link {self.link_id}: |grade| must be < {MAX_ABS_GRADE}, got {self.grade}")
        if not (self.speed_limit > 0 and math.isfinite(self.speed_limit)):
            raise ValidationError(f"link {self.link_id}: speed limit must be > 0, got {self.speed_limit}")

    @property
    def has_coords(self) -> bool:
        return self.x is not None and self.y is not None


@dataclass(frozen=True)
class Movement:
    from_link: str
    to_link: str


class RoadNetwork:
    """Immutable directed road network.

    ``links`` maps id to :class:`Link`. ``succ``/``pred`` are the forward and
    reverse adjacency in index space, each neighbour list sorted ascending.
    """

    def __init__(self, links: Iterable[Link], movements: Iterable[tuple[str, str]]):
        ordered = sorted(links, key=lambda l: l.link_id)
        self.ids: list[str] = [l.link_id for l in ordered]
        self.index: dict[str, int] = {lid: i for i, lid in enumerate(self.ids)}
        if len(self.index) != len(self.ids):
            raise ValidationError("duplicate link_id in network")
        self.links: dict[str, Link] = {l.link_id: l for l in ordered}
        self._check_reverse_symmetry()

        n = len(self.ids)
        fwd: list[set[int]] = [set() for _ in range(n)]
        self.dropped_uturns = 0
        self.dropped_duplicates = 0
        for a, b in movements:
            if a not in self.index or b not in self.index:
                missing = a if a not in self.index else b
                raise ValidationError(f"movement ({a}, {b}) references unknown link {missing}")
            if a == b or self.links[a].reverse_of == b:
                self.dropped_uturns += 1
                continue
            ia, ib = self.index[a], self.index[b]
            if ib in fwd[ia]:
                self.dropped_duplicates += 1
                continue
            fwd[ia].add(ib)
        self.succ: list[list[int]] = [sorted(s) for s in fwd]
        rev: list[list[int]] = [[] for _ in range(n)]
        for ia, nbrs in enumerate(self.succ):
            for ib in nbrs:
                rev[ib].append(ia)
        self.pred: list[list[int]] = rev  # already ascending: ia iterates in order
        if self.dropped_uturns:
            log.warning("dropped %d U-turn movements", self.dropped_uturns)
        if self.dropped_duplicates:
            log.warning("dropped %d duplicate movements", self.dropped_duplicates)

    def _check_reverse_symmetry(self):
        for lid, link in self.links.items():
            r = link.reverse_of
            if r is None:
                continue
            if r not in self.links:
                raise ValidationError(f"link {lid}: reverse_of references unknown link {r}")
            if self.links[r].reverse_of != lid:
                raise ValidationError(f"link {lid}: reverse_of {r} is not symmetric")

    def __len__(self):
        return len(self.ids)

    def __contains__(self, link_id):
        return link_id in self.index

    @property
    def n_movements(self) -> int:
        return sum(len(s) for s in self.succ)

    def movements(self) -> list[tuple[str, str]]:
        return [(self.ids[a], self.ids[b]) for a, nb in enumerate(self.succ) for b in nb]

    def idx(self, link_id: str) -> int:
        try:
            return self.index[link_id]
        except KeyError:
            raise NotFoundError(f"unknown link {link_id!r}") from None

    def speed_limits(self) -> list[float]:
        return sorted({l.speed_limit for l in self.links.values()})

    def has_coords(self) -> bool:
        return all(l.has_coords for l in self.links.values())


def successors(network: RoadNetwork, link_id: str) -> list[str]:
    """Permitted next links after ``link_id``, sorted by id."""
    i = network.idx(link_id)
    return [network.ids[j] for j in network.succ[i]]


def predecessors(network: RoadNetwork, link_id: str) -> list[str]:
    i = network.idx(link_id)
    return [network.ids[j] for j in network.pred[i]]


def _read_rows(path: Path, required: list[str]):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise ParseError(path, 1, f"missing columns {missing}")
        for row in reader:
            yield reader.line_num, row


def _float(path, line, row, col) -> float:
    try:
        value = float(row[col])
    except (TypeError, ValueError):
        raise ParseError(path, line, f"column {col!r}: not a number: {row[col]!r}") from None
    if not math.isfinite(value):
        raise ParseError(path, line, f"column {col!r}: non-finite value")
    return value


def load_links(links_file) -> list[Link]:
    path = Path(links_file)
    links = []
    for line, row in _read_rows(path, LINK_COLUMNS):
        lid = (row["link_id"] or "").strip()
        if not lid:
            raise ParseError(path, line, "empty link_id")
        rev = (row.get("reverse_of") or "").strip() or None
        x = y = None
        if row.get("x_m") not in (None, "") and row.get("y_m") not in (None, ""):
            x = _float(path, line, row, "x_m")
            y = _float(path, line, row, "y_m")
        try:
            links.append(
                Link(
                    lid,
                    _float(path, line, row, "length_m"),
                    _float(path, line, row, "grade_rad"),
                    _float(path, line, row, "speed_limit_mps"),
                    rev,
                    x,
                    y,
                )
            )
        except ValidationError as exc:
            raise ParseError(path, line, str(exc)) from None
    return links


def load_movements(movements_file) -> list[tuple[str, str]]:
    path = Path(movements_file)
    out = []
    for line, row in _read_rows(path, MOVEMENT_COLUMNS):
        a = (row["from_link"] or "").strip()
        b = (row["to_link"] or "").strip()
        if not a or not b:
            raise ParseError(path, line, "empty link reference")
        out.append((a, b))
    return out


def load_network(links_file, movements_file) -> RoadNetwork:
    return RoadNetwork(load_links(links_file), load_movements(movements_file))


def _fmt(x: float) -> str:
    return repr(float(x))


def write_network(network: RoadNetwork, links_file, movements_file) -> None:
    with_coords = network.has_coords()
    cols = LINK_COLUMNS + (COORD_COLUMNS if with_coords else [])
    with open(links_file, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for lid in network.ids:
            l = network.links[lid]
            row = [lid, _fmt(l.length), _fmt(l.grade), _fmt(l.speed_limit), l.reverse_of or ""]
            if with_coords:
                row += [_fmt(l.x), _fmt(l.y)]
            w.writerow(row)
    with open(movements_file, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MOVEMENT_COLUMNS)
        w.writerows(network.movements())


def links_by_category(network: RoadNetwork) -> Mapping[float, list[str]]:
    out: dict[float, list[str]] = {}
    for lid in network.ids:
        out.setdefault(network.links[lid].speed_limit, []).append(lid)
    return out
