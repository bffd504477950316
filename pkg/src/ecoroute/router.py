"""Routing on the link-expanded graph.

Nodes are directed links, edges are permitted movements. Every strategy is
solved all-to-one: a search outward from the destination over the reverse
graph yields, for every link, the best cost-to-go and the next link to take.

Cost convention: the value of a link counts the link itself plus everything
downstream up to, but not including, the destination link (whose value is 0).
Route totals add the destination link back, so a route's totals are the sums
over every link it contains.
"""

from __future__ import annotations

import heapq
import logging
import math
from collections.abc import Mapping
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .errors import ConfigError, ValidationError
from .fuel import MotionFeatures

log = logging.getLogger(__name__)

STRATEGIES = ("shortest", "fastest", "eco", "constrained_eco")
DEFAULT_EPSILON = 0.05
DEFAULT_SHARPNESS = 0.02
DEFAULT_MAX_LABELS = 8
INF = math.inf


@dataclass(frozen=True)
class EdgeCost:
    fuel: float
    time: float
    distance: float

    def __post_init__(self):
        for name in ("fuel", "time", "distance"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValidationError(f"edge {name} must be finite and >= 0, got {v}")


class LinkCosts(Mapping):
    """link_id -> EdgeCost, plus optional per-movement fuel.

    With ``movement_fuel`` set, leaving link ``a`` into ``b`` costs
    ``movement_fuel[(a, b)]`` kg instead of ``a``'s link-level fuel.
    """

    def __init__(self, costs: Mapping[str, EdgeCost], movement_fuel: Mapping[tuple[str, str], float] | None = None):
        self._costs = dict(costs)
        self.movement_fuel = dict(movement_fuel) if movement_fuel is not None else None
        if self.movement_fuel:
            for key, v in self.movement_fuel.items():
                if not (math.isfinite(v) and v >= 0):
                    raise ValidationError(f"movement {key} fuel must be finite and >= 0, got {v}")

    def __getitem__(self, link_id):
        return self._costs[link_id]

    def __iter__(self):
        return iter(self._costs)

    def __len__(self):
        return len(self._costs)

    def fuel_between(self, a: str, b: str | None) -> float:
        if b is not None and self.movement_fuel is not None:
            got = self.movement_fuel.get((a, b))
            if got is not None:
                return got
        return self._costs[a].fuel

    def fuel_scale(self, share: float = 1.0) -> float:
        """Seconds per kg at which total fuel is worth ``share`` of total time."""
        t = sum(c.time for c in self._costs.values())
        f = sum(c.fuel for c in self._costs.values())
        return share * t / f if f > 0 else 1.0


# "auto" fuel scale: network-wide, fuel is worth a tenth of time. At parity
# (share 1) a link costs about the same over budget as under it, so the
# time budget barely binds.
AUTO_FUEL_SHARE = 0.1


def resolve_fuel_scale(costs: LinkCosts, fuel_scale: float | str) -> float:
    if fuel_scale == "auto":
        return costs.fuel_scale(AUTO_FUEL_SHARE)
    lam = float(fuel_scale)
    if not (math.isfinite(lam) and lam > 0):
        raise ConfigError(f"fuel_scale must be > 0 or 'auto', got {fuel_scale!r}")
    return lam


def edge_costs(network, fuel_model, speed_source=None, movement_mode: bool = False) -> LinkCosts:
    """Per-link fuel, time and distance at historical speeds.

    ``speed_source`` maps link_id to m/s (anything with ``[]`` and ``in``);
    links it lacks fall back to the posted limit. Link fuel is predicted at
    zero speed change. In movement mode each movement ``a -> b`` gets its own
    fuel with speed change ``v_b - v_a``.
    """
    speeds = {}
    for lid in network.ids:
        link = network.links[lid]
        v = link.speed_limit
        if speed_source is not None:
            try:
                v = float(speed_source[lid])
            except (KeyError, IndexError):
                v = link.speed_limit
        if not (math.isfinite(v) and v > 0):
            raise ValidationError(f"link {lid}: nonpositive speed {v}")
        speeds[lid] = v

    def feats(lid, dv):
        link = network.links[lid]
        return MotionFeatures(speeds[lid], dv, link.grade, link.length, link.speed_limit)

    fuel = fuel_model.predict_batch([feats(lid, 0.0) for lid in network.ids])
    costs = {}
    for lid, f in zip(network.ids, fuel):
        link = network.links[lid]
        costs[lid] = EdgeCost(float(f), link.length / speeds[lid], link.length)
    movement_fuel = None
    if movement_mode:
        moves = network.movements()
        mf = fuel_model.predict_batch([feats(a, speeds[b] - speeds[a]) for a, b in moves]) if moves else []
        movement_fuel = {m: float(f) for m, f in zip(moves, mf)}
    return LinkCosts(costs, movement_fuel)


# --------------------------------------------------------------------------
# selectors


@dataclass(frozen=True)
class Blend:
    """Fixed-weight cost ``time_weight * t + fuel_weight * fuel``."""

    time_weight: float
    fuel_weight: float

    def __post_init__(self):
        if self.time_weight < 0 or self.fuel_weight < 0:
            raise ValidationError("blend weights must be nonnegative")


def _weight_lists(network, costs: LinkCosts, selector):
    """Per-link scalar costs and, in movement mode, per-edge overrides."""
    ids = network.ids
    missing = [lid for lid in ids if lid not in costs]
    if missing:
        raise ValidationError(f"no cost for link {missing[0]}")
    dist = [costs[l].distance for l in ids]
    time = [costs[l].time for l in ids]
    fuel = [costs[l].fuel for l in ids]
    if selector == "distance":
        return dist, None
    if selector == "time":
        return time, None
    if isinstance(selector, Blend):
        tw, fw = selector.time_weight, selector.fuel_weight
        base = [tw * t + fw * f for t, f in zip(time, fuel)]
    elif selector == "fuel":
        tw, fw = 0.0, 1.0
        base = fuel
    else:
        raise ConfigError(f"unknown cost selector {selector!r}")
    over = None
    if costs.movement_fuel is not None:
        idx = network.index
        over = {(idx[a], idx[b]): tw * time[idx[a]] + fw * f for (a, b), f in costs.movement_fuel.items()}
    return base, over


# --------------------------------------------------------------------------
# value tables


@dataclass(frozen=True)
class ValueEntry:
    value: float
    successor: str | None
    time: float
    fuel: float


@dataclass
class ValueTable:
    """All-to-one solution for one destination.

    Lists are indexed like ``network.ids``. ``succ`` is -1 at the destination
    and at unreachable links (value inf). Constrained tables also hold the
    label chain each link's choice follows, in ``chains``, and every label
    retained per link as (fuel, time, cost) in ``labels``.
    """

    network: object
    destination: str
    selector: object
    value: list[float]
    succ: list[int]
    time: list[float]
    fuel: list[float]
    chains: list | None = field(default=None, repr=False)
    labels: list | None = field(default=None, repr=False)

    def __getitem__(self, link_id) -> ValueEntry:
        i = self.network.idx(link_id)
        s = self.succ[i]
        return ValueEntry(self.value[i], self.network.ids[s] if s >= 0 else None, self.time[i], self.fuel[i])

    def reachable(self, link_id) -> bool:
        return math.isfinite(self.value[self.network.idx(link_id)])

    def path(self, origin: str) -> list[str] | None:
        """Link ids from ``origin`` to the destination, or None if unreachable."""
        i = self.network.idx(origin)
        if not math.isfinite(self.value[i]):
            return None
        ids = self.network.ids
        if self.chains is not None:
            out = []
            lab = self.chains[i]
            while lab is not None:
                out.append(ids[lab.link])
                lab = lab.next
            return out
        out = [ids[i]]
        while self.succ[i] >= 0:
            i = self.succ[i]
            out.append(ids[i])
        return out


def all_to_one(network, costs: LinkCosts, destination: str, selector="time") -> ValueTable:
    """Exact cost-to-go for every link under a nonnegative scalar cost.

    Dijkstra over the reverse graph. Ties go to the successor with the
    smaller link id.
    """
    d = network.idx(destination)
    w, over = _weight_lists(network, costs, selector)
    n = len(network.ids)
    time = [costs[l].time for l in network.ids]
    fuel = [costs[l].fuel for l in network.ids]
    mfuel = None
    if costs.movement_fuel is not None:
        idx = network.index
        mfuel = {(idx[a], idx[b]): f for (a, b), f in costs.movement_fuel.items()}

    val = [INF] * n
    succ = [-1] * n
    done = [False] * n
    val[d] = 0.0
    pred = network.pred
    heap = [(0.0, d)]
    pop, push = heapq.heappop, heapq.heappush
    while heap:
        du, u = pop(heap)
        if done[u]:
            continue
        done[u] = True
        for p in pred[u]:
            if done[p]:
                continue
            c = w[p] if over is None else over.get((p, u), w[p])
            nv = c + du
            vp = val[p]
            if nv < vp:
                val[p] = nv
                succ[p] = u
                push(heap, (nv, p))
            elif nv == vp and u < succ[p]:
                succ[p] = u

    acc_t, acc_f = _accumulate(succ, val, d, time, fuel, mfuel)
    return ValueTable(network, destination, selector, val, succ, acc_t, acc_f)


def _accumulate(succ, val, d, time, fuel, mfuel):
    """Time and fuel summed along each successor chain (destination excluded)."""
    n = len(succ)
    acc_t = [INF] * n
    acc_f = [INF] * n
    acc_t[d] = acc_f[d] = 0.0
    for start in range(n):
        if acc_t[start] < INF or val[start] == INF:
            continue
        chain = []
        i = start
        while acc_t[i] == INF:
            chain.append(i)
            i = succ[i]
        for j in reversed(chain):
            s = succ[j]
            f = fuel[j] if mfuel is None else mfuel.get((j, s), fuel[j])
            acc_t[j] = time[j] + acc_t[s]
            acc_f[j] = f + acc_f[s]
    return acc_t, acc_f


# --------------------------------------------------------------------------
# travel-time-constrained eco search


def time_weight(t_acc: float, t_budget: float, sharpness: float) -> float:
    """Sigmoid weight on time: 0.5 exactly at the budget, -> 1 beyond it."""
    if t_budget <= 0:
        return 0.5 if t_acc <= 0 else 1.0
    z = (t_acc - t_budget) / (sharpness * t_budget)
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


class _Label:
    __slots__ = ("fuel", "time", "cost", "link", "next", "alive")

    def __init__(self, fuel, time, cost, link, nxt):
        self.fuel = fuel
        self.time = time
        self.cost = cost
        self.link = link
        self.next = nxt
        self.alive = True


def _dominates(a: _Label, b: _Label) -> bool:
    return a.fuel <= b.fuel and a.time <= b.time


def _trim(labels: list[_Label], cap: int) -> list[_Label]:
    # keep the fastest and the most frugal label, then the cheapest blends
    if len(labels) <= cap:
        return labels
    fastest = min(labels, key=lambda l: (l.time, l.fuel))
    frugal = min(labels, key=lambda l: (l.fuel, l.time))
    keep = [fastest] if fastest is frugal else [fastest, frugal]
    rest = sorted((l for l in labels if l is not fastest and l is not frugal), key=lambda l: (l.cost, l.time))
    keep = (keep + rest)[:cap]
    kept_ids = {id(l) for l in keep}
    for l in labels:
        if id(l) not in kept_ids:
            l.alive = False
    return keep


def constrained_eco(
    network,
    costs: LinkCosts,
    destination: str,
    epsilon: float = DEFAULT_EPSILON,
    sharpness: float = DEFAULT_SHARPNESS,
    fastest: ValueTable | None = None,
    max_labels: int = DEFAULT_MAX_LABELS,
    fuel_scale: float | str = "auto",
) -> ValueTable:
    """Eco routing under a soft travel-time budget.

    A label at link x is one path from x to the destination carrying its fuel
    F, time T and blended cost G. Extending a label backwards onto link p sets
    T' = T + t(p) and adds ``(1 - w) * fuel_scale * c(p) + w * t(p)`` to G
    with ``w = time_weight(T', (1 + epsilon) * t*(p), sharpness)``, where t*
    is the fastest time-to-go. Labels are Pareto-pruned on (F, T) and capped
    at ``max_labels`` per link. Each link reports its lowest-G label.

    ``fuel_scale`` (s/kg) puts fuel on the time scale; "auto" uses a tenth
    of the ratio of total link time to total link fuel.
    """
    if fastest is None:
        raise ValidationError("constrained eco search needs the fastest-time table for the same destination")
    if fastest.destination != destination or fastest.selector != "time":
        raise ValidationError("fastest table must use the time selector and the same destination")
    if max_labels < 1:
        raise ConfigError(f"max_labels must be >= 1, got {max_labels}")
    if epsilon < 0:
        raise ConfigError(f"epsilon must be >= 0, got {epsilon}")
    if sharpness <= 0:
        raise ConfigError(f"sharpness must be > 0, got {sharpness}")
    lam = resolve_fuel_scale(costs, fuel_scale)

    d = network.idx(destination)
    ids = network.ids
    n = len(ids)
    time = [costs[l].time for l in ids]
    fuel = [costs[l].fuel for l in ids]
    mfuel = None
    if costs.movement_fuel is not None:
        idx = network.index
        mfuel = {(idx[a], idx[b]): f for (a, b), f in costs.movement_fuel.items()}
    budget = [(1.0 + epsilon) * t for t in fastest.value]
    pred = network.pred

    sets: list[list[_Label]] = [[] for _ in range(n)]
    root = _Label(0.0, 0.0, 0.0, d, None)
    sets[d].append(root)
    # extend in order of accumulated time; ties by fuel then link index
    heap = [(0.0, 0.0, d, 0, root)]
    counter = 1
    pops = 0
    limit = 50 * max_labels * max(n, 1)
    while heap:
        _, _, u, _, lab = heapq.heappop(heap)
        if not lab.alive:
            continue
        pops += 1
        if pops > limit:
            log.warning("label search to %s stopped after %d expansions", destination, pops)
            break
        for p in pred[u]:
            if p == d:
                continue
            tb = budget[p]
            if tb == INF:
                continue
            c = fuel[p] if mfuel is None else mfuel.get((p, u), fuel[p])
            tp = time[p]
            t_new = lab.time + tp
            w = time_weight(t_new, tb, sharpness)
            new = _Label(lab.fuel + c, t_new, lab.cost + (1.0 - w) * lam * c + w * tp, p, lab)
            bucket = sets[p]
            if any(_dominates(o, new) for o in bucket):
                continue
            kept = []
            for o in bucket:
                if _dominates(new, o):
                    o.alive = False
                else:
                    kept.append(o)
            kept.append(new)
            sets[p] = _trim(kept, max_labels)
            if new.alive:
                heapq.heappush(heap, (new.time, new.fuel, p, counter, new))
                counter += 1

    val = [INF] * n
    succ = [-1] * n
    acc_t = [INF] * n
    acc_f = [INF] * n
    chains: list = [None] * n
    for i in range(n):
        if not sets[i]:
            continue
        best = min(sets[i], key=lambda l: (l.cost, l.time, l.fuel))
        val[i] = best.cost
        succ[i] = best.next.link if best.next is not None else -1
        acc_t[i] = best.time
        acc_f[i] = best.fuel
        chains[i] = best
    retained = [[(l.fuel, l.time, l.cost) for l in b] for b in sets]
    selector = ("constrained_eco", epsilon, sharpness)
    return ValueTable(network, destination, selector, val, succ, acc_t, acc_f, chains, retained)


# --------------------------------------------------------------------------
# queries


@dataclass(frozen=True)
class RouteQuery:
    origin: str
    destination: str
    strategy: str = "fastest"
    epsilon: float = DEFAULT_EPSILON
    sigmoid_sharpness: float = DEFAULT_SHARPNESS

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {', '.join(STRATEGIES)}")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.sigmoid_sharpness <= 0:
            raise ConfigError("sigmoid sharpness must be > 0")


@dataclass
class RouteResult:
    strategy: str
    origin: str
    destination: str
    links: tuple[str, ...]
    breakdown: tuple[EdgeCost, ...]
    total_fuel: float
    total_time: float
    total_distance: float

    @property
    def found(self) -> bool:
        return bool(self.links)

    def to_dict(self) -> dict:
        def num(x):
            return x if math.isfinite(x) else None

        return {
            "strategy": self.strategy,
            "origin": self.origin,
            "destination": self.destination,
            "found": self.found,
            "links": list(self.links),
            "total_fuel_kg": num(self.total_fuel),
            "total_time_s": num(self.total_time),
            "total_distance_m": num(self.total_distance),
        }


def no_route(query: RouteQuery) -> RouteResult:
    return RouteResult(query.strategy, query.origin, query.destination, (), (), INF, INF, INF)


def path_costs(costs: LinkCosts, links: Sequence[str]) -> tuple[EdgeCost, ...]:
    """Per-link costs along a path; movement fuel applies where defined."""
    out = []
    for k, lid in enumerate(links):
        c = costs[lid]
        nxt = links[k + 1] if k + 1 < len(links) else None
        out.append(EdgeCost(costs.fuel_between(lid, nxt), c.time, c.distance))
    return tuple(out)


def result_from_path(query: RouteQuery, costs: LinkCosts, links: Sequence[str] | None) -> RouteResult:
    if not links:
        return no_route(query)
    parts = path_costs(costs, links)
    return RouteResult(
        query.strategy,
        query.origin,
        query.destination,
        tuple(links),
        parts,
        math.fsum(p.fuel for p in parts),
        math.fsum(p.time for p in parts),
        math.fsum(p.distance for p in parts),
    )


_SELECTOR = {"shortest": "distance", "fastest": "time", "eco": "fuel"}


class Router:
    """Strategy dispatch with per-destination table caching."""

    def __init__(
        self,
        network,
        costs: LinkCosts,
        max_labels: int = DEFAULT_MAX_LABELS,
        fuel_scale: float | str = "auto",
    ):
        self.network = network
        self.costs = costs
        self.max_labels = max_labels
        self.fuel_scale = resolve_fuel_scale(costs, fuel_scale)
        self._tables: dict = {}

    def table(self, strategy: str, destination: str, epsilon=DEFAULT_EPSILON, sharpness=DEFAULT_SHARPNESS):
        key = (strategy, destination) if strategy != "constrained_eco" else (strategy, destination, epsilon, sharpness)
        got = self._tables.get(key)
        if got is None:
            if strategy == "constrained_eco":
                got = constrained_eco(
                    self.network,
                    self.costs,
                    destination,
                    epsilon,
                    sharpness,
                    self.table("fastest", destination),
                    self.max_labels,
                    self.fuel_scale,
                )
            elif strategy in _SELECTOR:
                got = all_to_one(self.network, self.costs, destination, _SELECTOR[strategy])
            else:
                raise ConfigError(f"unknown strategy {strategy!r}")
            self._tables[key] = got
        return got

    def route(self, query: RouteQuery) -> RouteResult:
        self.network.idx(query.origin)
        self.network.idx(query.destination)
        if query.origin == query.destination:
            return result_from_path(query, self.costs, [query.origin])
        t = self.table(query.strategy, query.destination, query.epsilon, query.sigmoid_sharpness)
        return result_from_path(query, self.costs, t.path(query.origin))

    def forget(self, destination: str | None = None) -> None:
        if destination is None:
            self._tables.clear()
        else:
            self._tables = {k: v for k, v in self._tables.items() if k[1] != destination}


def route(query: RouteQuery, router: Router) -> RouteResult:
    return router.route(query)


def route_many(
    router: Router,
    od_pairs: Iterable[tuple[str, str]],
    strategies: Sequence[str] = STRATEGIES,
    epsilon: float = DEFAULT_EPSILON,
    sharpness: float = DEFAULT_SHARPNESS,
) -> dict[tuple[str, str], dict[str, RouteResult]]:
    """Every strategy for every OD pair, grouping work by destination."""
    by_dest: dict[str, list[str]] = {}
    for o, d in od_pairs:
        by_dest.setdefault(d, []).append(o)
    out = {}
    for d in sorted(by_dest):
        for o in by_dest[d]:
            out[(o, d)] = {s: router.route(RouteQuery(o, d, s, epsilon, sharpness)) for s in strategies}
        router.forget(d)
    return out


# --------------------------------------------------------------------------
# batches across processes

_worker_state: dict = {}


def _init_worker(network, costs, selector):
    _worker_state.update(network=network, costs=costs, selector=selector)


def _values_for(destination):
    st = _worker_state
    t = all_to_one(st["network"], st["costs"], destination, st["selector"])
    return destination, t.value, t.succ


def batch_all_to_one(
    network,
    costs: LinkCosts,
    destinations: Sequence[str],
    selector="time",
    workers: int = 1,
    on_result: Callable | None = None,
) -> dict[str, tuple[list[float], list[int]]]:
    """Value and successor lists for many destinations.

    With ``workers > 1`` destinations are spread over a process pool; each
    search stays single-threaded.
    """
    out = {}
    if workers <= 1 or len(destinations) < 2:
        for dest in destinations:
            t = all_to_one(network, costs, dest, selector)
            out[dest] = (t.value, t.succ)
            if on_result:
                on_result(dest)
        return out
    with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(network, costs, selector)) as ex:
        for dest, val, succ in ex.map(_values_for, destinations, chunksize=max(1, len(destinations) // (4 * workers))):
            out[dest] = (val, succ)
            if on_result:
                on_result(dest)
    return out
