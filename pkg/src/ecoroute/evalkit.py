"""Evaluation: error metrics, fuel-model comparison, routing-strategy summaries."""

from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import InsufficientDataError, UndefinedMetricError, ValidationError
from .fuel import MotionFeatures, Standardizer, features_to_array
from .gmr import GmrModel
from .vbgmm import VbHyperparams, expected_mixture, fit

log = logging.getLogger(__name__)

MIN_TEST_TRAVERSALS = 100
TRUTH_MAX_COMPONENTS = 5


def _pair(pred, truth):
    p = np.asarray(pred, float).ravel()
    t = np.asarray(truth, float).ravel()
    if p.shape != t.shape:
        raise ValidationError(f"length mismatch: {p.size} predictions, {t.size} truths")
    return p, t


def r_squared(pred, truth) -> float:
    p, t = _pair(pred, truth)
    if t.size < 2:
        raise UndefinedMetricError("R² needs at least two samples")
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot == 0.0:
        raise UndefinedMetricError("R² is undefined for constant truth")
    return 1.0 - float(np.sum((p - t) ** 2)) / ss_tot


def mape(pred, truth) -> float:
    """Mean absolute percentage error over nonzero truths, in percent."""
    return mape_counted(pred, truth)[0]


def mape_counted(pred, truth) -> tuple[float, int]:
    """MAPE plus the number of zero-truth samples left out."""
    p, t = _pair(pred, truth)
    nz = t != 0
    if not np.any(nz):
        raise UndefinedMetricError("MAPE is undefined when every truth value is zero")
    skipped = int(t.size - nz.sum())
    if skipped:
        log.warning("MAPE: excluded %d zero-truth samples", skipped)
    return float(np.mean(np.abs(p[nz] - t[nz]) / np.abs(t[nz])) * 100.0), skipped


def weighted_mean(values, weights) -> float:
    v = np.asarray(values, float)
    w = np.asarray(weights, float)
    if v.shape != w.shape or v.size == 0:
        raise ValidationError("weighted mean needs equal-length, nonempty inputs")
    if np.any(w < 0) or w.sum() <= 0:
        raise ValidationError("weights must be nonnegative with a positive sum")
    return float(np.sum(v * w) / np.sum(w))


def percentile(values, q: float) -> float:
    """Inclusive linear-interpolation percentile (q in [0, 100])."""
    v = np.asarray(values, float)
    if v.size == 0:
        raise ValidationError("percentile of an empty sample")
    return float(np.percentile(v, q, method="linear"))


# --------------------------------------------------------------------------
# fuel-model comparison


@dataclass
class MetricReport:
    r_squared: float
    mape: float
    n: int
    by_category: dict[float, dict] = field(default_factory=dict)

    def __post_init__(self):
        if self.n <= 0:
            raise ValidationError("metric report needs n > 0")

    def to_dict(self) -> dict:
        return {
            "r_squared": self.r_squared,
            "mape": self.mape,
            "n": self.n,
            "by_category": {repr(k): v for k, v in sorted(self.by_category.items())},
        }


def _safe(metric, p, t):
    try:
        return metric(p, t)
    except UndefinedMetricError:
        return None


def metric_report(pred, truth, categories=None) -> MetricReport:
    p, t = _pair(pred, truth)
    by = {}
    if categories is not None:
        cats = np.asarray(categories, float)
        for c in np.unique(cats):
            m = cats == c
            by[float(c)] = {"r_squared": _safe(r_squared, p[m], t[m]), "mape": _safe(mape, p[m], t[m]), "n": int(m.sum())}
    return MetricReport(r_squared(p, t), mape(p, t), int(t.size), by)


def link_truth(features: Sequence[MotionFeatures], fuel, seed: int = 0, max_components: int = TRUTH_MAX_COMPONENTS):
    """Per-traversal conditional expected fuel on a single link.

    A mixture over (avg_speed, speed_change, fuel) is fitted to that link's
    traversals and its regression of fuel on the two motion variables is
    evaluated at each traversal.
    """
    F = features_to_array(features)
    y = np.asarray(fuel, float)
    Z = np.column_stack([F[:, 0], F[:, 1], y])
    sc = Standardizer.fit(Z)
    post = fit(sc.apply(Z), VbHyperparams(k_max=max_components), seed=seed)
    g = GmrModel(expected_mixture(post))
    Xs = (Z[:, :2] - sc.mean[:2]) / sc.scale[:2]
    return g.predict_mean(Xs) * sc.scale[2] + sc.mean[2]


def compare_models(
    models: Mapping[str, object],
    test_samples: Sequence[tuple[MotionFeatures, float, str]],
    min_traversals: int = MIN_TEST_TRAVERSALS,
    seed: int = 0,
    truth_estimator: Callable | None = None,
    min_links: int = 1,
) -> dict[str, MetricReport]:
    """Score fuel models against per-link conditional-expectation truth.

    ``test_samples`` holds (features, fuel, link_id). Links with no more
    than ``min_traversals`` samples are dropped. Each model needs a
    ``predict_batch`` over feature rows.
    """
    by_link: dict[str, list[int]] = defaultdict(list)
    for k, (_, _, lid) in enumerate(test_samples):
        by_link[lid].append(k)
    kept = sorted(l for l, ks in by_link.items() if len(ks) > min_traversals)
    if len(kept) < min_links:
        raise InsufficientDataError(
            f"{len(kept)} test links have more than {min_traversals} traversals; need at least {min_links}"
        )
    estimator = truth_estimator or (lambda f, y: link_truth(f, y, seed=seed))
    feats, truth = [], []
    for lid in kept:
        ks = by_link[lid]
        f = [test_samples[k][0] for k in ks]
        feats.extend(f)
        truth.append(np.asarray(estimator(f, [test_samples[k][1] for k in ks]), float))
    F = features_to_array(feats)
    t = np.concatenate(truth)
    return {name: metric_report(model.predict_batch(F), t, F[:, 4]) for name, model in sorted(models.items())}


def split_links(link_ids, train_fraction: float = 0.7, seed: int = 0) -> tuple[list[str], list[str]]:
    """Random link-level train/test split."""
    ids = sorted(set(link_ids))
    rng = np.random.default_rng(seed)
    rng.shuffle(ids)
    k = int(round(train_fraction * len(ids)))
    return sorted(ids[:k]), sorted(ids[k:])


# --------------------------------------------------------------------------
# strategy comparison

STRATEGY_ORDER = ("shortest", "fastest", "eco", "constrained_eco")


@dataclass
class StrategyComparison:
    """Per-OD raw and normalised costs plus frequency-weighted aggregates.

    Fuel is normalised by the eco route's fuel, time by the fastest route's
    time, both taken from ``baseline`` results when given.
    """

    rows: list[dict]
    expected: dict[str, dict[str, float]]
    percentiles: dict[str, dict[str, float]]
    coincidence: dict[str, float]
    skipped: list[str]

    def to_dict(self) -> dict:
        return {
            "expected": self.expected,
            "percentiles": self.percentiles,
            "coincidence": self.coincidence,
            "skipped": self.skipped,
            "n_od": len({r["od_id"] for r in self.rows}),
        }


def _od_id(key) -> str:
    return key if isinstance(key, str) else f"{key[0]}->{key[1]}"


def compare_strategies(
    results: Mapping,
    frequencies: Mapping | None = None,
    baseline: Mapping | None = None,
    strategies: Sequence[str] = STRATEGY_ORDER,
) -> StrategyComparison:
    """Summarise routing strategies over OD pairs.

    ``results[od][strategy]`` is a RouteResult. OD pairs with no route under
    any strategy, or whose normaliser is zero, are skipped and listed.
    """
    gaps = [f"{_od_id(od)}:{s}" for od, per in results.items() for s in strategies if s not in per]
    if gaps:
        raise ValidationError(f"missing strategy results: {', '.join(gaps[:10])}" + (" ..." if len(gaps) > 10 else ""))
    ref = baseline if baseline is not None else results
    rows, skipped = [], []
    for od in results:
        per = results[od]
        base = ref.get(od) if baseline is not None else per
        if base is None or not all(per[s].found for s in strategies):
            skipped.append(_od_id(od))
            continue
        eco_f, fast_t = base["eco"].total_fuel, base["fastest"].total_time
        if not (eco_f > 0 and fast_t > 0):
            skipped.append(_od_id(od))
            continue
        w = 1.0 if frequencies is None else float(frequencies.get(od, 0.0))
        for s in strategies:
            r = per[s]
            rows.append(
                {
                    "strategy": s,
                    "od_id": _od_id(od),
                    "fuel_kg": r.total_fuel,
                    "time_s": r.total_time,
                    "norm_fuel": r.total_fuel / eco_f,
                    "norm_time": r.total_time / fast_t,
                    "weight": w,
                    "links": r.links,
                }
            )
    if skipped:
        log.warning("skipped %d OD pairs without a complete, nonzero comparison", len(skipped))
    if not rows:
        raise InsufficientDataError("no OD pair has results for every strategy")

    expected, pct = {}, {}
    for s in strategies:
        mine = [r for r in rows if r["strategy"] == s]
        w = [r["weight"] for r in mine]
        expected[s] = {k: weighted_mean([r[k] for r in mine], w) for k in ("fuel_kg", "time_s", "norm_fuel", "norm_time")}
        pct[s] = {
            f"{k}_p{q}": percentile([r[k] for r in mine], q) for k in ("norm_fuel", "norm_time") for q in (10, 90)
        }
    paths: dict[str, dict[str, tuple]] = defaultdict(dict)
    for r in rows:
        paths[r["od_id"]][r["strategy"]] = r["links"]
    coincidence = {}
    for i, a in enumerate(strategies):
        for b in strategies[i + 1 :]:
            same = [p[a] == p[b] for p in paths.values()]
            coincidence[f"{a}={b}"] = float(np.mean(same))
    return StrategyComparison(rows, expected, pct, coincidence, skipped)


CSV_COLUMNS = ["strategy", "od_id", "fuel_kg", "time_s", "norm_fuel", "norm_time", "weight"]


def write_comparison(comp: StrategyComparison, json_path, csv_path) -> None:
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(comp.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in comp.rows:
            w.writerow([r[c] if isinstance(r[c], str) else repr(float(r[c])) for c in CSV_COLUMNS])
