"""Link-level fuel models.

The main model is a per-speed-limit-category GMR over quadratic motion
features. Two simple regressions serve as benchmarks: fuel per metre as a
quartic in average speed, and a power-balance (idle rate + Willans slope on
estimated tractive work) model.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import vbgmm
from .errors import InsufficientDataError, NotFoundError, ValidationError
from .gmr import GmrModel
from .vehicle import G, VehicleParams

log = logging.getLogger(__name__)

BUNDLE_VERSION = 1
FEATURE_SCHEMA = "quad14-v1"
FEATURE_NAMES = (
    "avg_speed",
    "speed_change",
    "grade",
    "length",
    "avg_speed^2",
    "speed_change^2",
    "grade^2",
    "length^2",
    "avg_speed*speed_change",
    "avg_speed*grade",
    "avg_speed*length",
    "speed_change*grade",
    "speed_change*length",
    "grade*length",
)
MIN_CATEGORY_SAMPLES = 200
RIDGE_LAMBDA = 1e-6
MIN_SPEED = 0.1  # m/s, guards travel time L / v


@dataclass(frozen=True)
class MotionFeatures:
    avg_speed: float
    speed_change: float
    grade: float
    length: float
    speed_limit: float

    def __post_init__(self):
        if not self.avg_speed >= 0:
            raise ValidationError(f"avg_speed must be >= 0, got {self.avg_speed}")
        if not self.length > 0:
            raise ValidationError(f"length must be > 0, got {self.length}")

    def as_row(self) -> tuple[float, float, float, float, float]:
        return (self.avg_speed, self.speed_change, self.grade, self.length, self.speed_limit)


def features_to_array(features: Iterable[MotionFeatures]) -> np.ndarray:
    """(n, 5) array: avg_speed, speed_change, grade, length, speed_limit."""
    rows = [f.as_row() for f in features]
    return np.asarray(rows, float).reshape(len(rows), 5)


def _as_array(features) -> np.ndarray:
    if isinstance(features, MotionFeatures):
        return features_to_array([features])
    if isinstance(features, np.ndarray):
        return np.atleast_2d(features)
    return features_to_array(features)


def expand_array(F: np.ndarray) -> np.ndarray:
    """Quadratic expansion of the four continuous columns of ``F``; (n, 14)."""
    v, dv, th, L = F[:, 0], F[:, 1], F[:, 2], F[:, 3]
    return np.column_stack([v, dv, th, L, v * v, dv * dv, th * th, L * L, v * dv, v * th, v * L, dv * th, dv * L, th * L])


def expand(features: MotionFeatures) -> np.ndarray:
    return expand_array(features_to_array([features]))[0]


# --------------------------------------------------------------------------
# GMR model


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, Z: np.ndarray) -> "Standardizer":
        mean = Z.mean(axis=0)
        scale = Z.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
        return cls(mean, scale)

    def apply(self, Z):
        return (Z - self.mean) / self.scale

    def invert(self, Zs):
        return Zs * self.scale + self.mean


class UnknownCategoryError(NotFoundError):
    pass


def _category_key(limit: float) -> float:
    return float(limit)


class _CategoricalModel:
    kind = ""

    def __init__(self):
        self.clamped = 0

    def _resolve(self, limit: float) -> float:
        raise NotImplementedError

    def _predict_category(self, cat: float, F: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def predict_batch(self, features) -> np.ndarray:
        F = _as_array(features)
        out = np.empty(F.shape[0])
        limits = F[:, 4]
        for lim in np.unique(limits):
            mask = limits == lim
            out[mask] = self._predict_category(self._resolve(float(lim)), F[mask])
        neg = out < 0
        if np.any(neg):
            self.clamped += int(neg.sum())
            out[neg] = 0.0
        return out

    def predict(self, features: MotionFeatures) -> float:
        return float(self.predict_batch([features])[0])


class CategoricalGmrFuelModel(_CategoricalModel):
    """One GMR per speed-limit category over (expanded features, fuel)."""

    kind = "gmr"

    def __init__(self, models: dict, scalers: dict, merged: dict | None = None):
        super().__init__()
        self.models: dict[float, GmrModel] = dict(models)
        self.scalers: dict[float, Standardizer] = dict(scalers)
        self.merged: dict[float, float] = dict(merged or {})

    @property
    def categories(self) -> list[float]:
        return sorted(self.models)

    def _resolve(self, limit):
        if limit in self.models:
            return limit
        if limit in self.merged:
            return self.merged[limit]
        raise UnknownCategoryError(f"speed-limit category {limit} is not covered by the fuel model")

    def _predict_category(self, cat, F):
        sc = self.scalers[cat]
        X = (expand_array(F) - sc.mean[:-1]) / sc.scale[:-1]
        ys = self.models[cat].predict_mean(X)
        return ys * sc.scale[-1] + sc.mean[-1]

    def to_dict(self) -> dict:
        return {
            "format": "ecoroute.fuel_model",
            "version": BUNDLE_VERSION,
            "kind": self.kind,
            "feature_schema": FEATURE_SCHEMA,
            "categories": [
                {
                    "speed_limit": cat,
                    "mean": self.scalers[cat].mean.tolist(),
                    "scale": self.scalers[cat].scale.tolist(),
                    "gmr": self.models[cat].to_dict(),
                }
                for cat in self.categories
            ],
            "merged": [[k, v] for k, v in sorted(self.merged.items())],
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "CategoricalGmrFuelModel":
        if blob.get("feature_schema") != FEATURE_SCHEMA:
            raise ValidationError(f"unsupported feature schema {blob.get('feature_schema')!r}")
        models, scalers = {}, {}
        for c in blob["categories"]:
            cat = _category_key(c["speed_limit"])
            models[cat] = GmrModel.from_dict(c["gmr"])
            scalers[cat] = Standardizer(np.asarray(c["mean"], float), np.asarray(c["scale"], float))
        merged = {_category_key(a): _category_key(b) for a, b in blob.get("merged", [])}
        return cls(models, scalers, merged)


def _group_by_category(samples) -> dict[float, list[int]]:
    groups: dict[float, list[int]] = {}
    for i, (f, _) in enumerate(samples):
        groups.setdefault(_category_key(f.speed_limit), []).append(i)
    return groups


def merge_small_categories(counts: dict[float, int], min_samples: int) -> dict[float, float]:
    """Map every category to the one it is fitted with.

    Categories below ``min_samples`` join the nearest (by speed-limit value)
    category that has enough data; ties go to the lower limit.
    """
    big = sorted(c for c, n in counts.items() if n >= min_samples)
    if not big:
        raise InsufficientDataError(f"no speed-limit category has at least {min_samples} samples: {counts}")
    target = {}
    for c in sorted(counts):
        if c in big:
            target[c] = c
        else:
            t = min(big, key=lambda b: (abs(b - c), b))
            log.warning("speed-limit category %s has %d samples; merged into category %s", c, counts[c], t)
            target[c] = t
    return target


def fit_gmr_fuel(
    samples: Sequence[tuple[MotionFeatures, float]],
    hyper: vbgmm.VbHyperparams | None = None,
    seed: int = 0,
    min_per_category: int = MIN_CATEGORY_SAMPLES,
    prune_below: float = 0.01,
    tol: float = 1e-6,
    max_iter: int = 500,
    workers: int = 1,
) -> CategoricalGmrFuelModel:
    hyper = hyper or vbgmm.VbHyperparams()
    F = features_to_array([f for f, _ in samples])
    y = np.asarray([fuel for _, fuel in samples], float)
    groups = _group_by_category(samples)
    target = merge_small_categories({c: len(ix) for c, ix in groups.items()}, min_per_category)
    fit_groups: dict[float, list[int]] = {}
    for c, ix in groups.items():
        fit_groups.setdefault(target[c], []).extend(ix)

    def fit_one(cat):
        ix = np.asarray(sorted(fit_groups[cat]))
        Z = np.column_stack([expand_array(F[ix]), y[ix]])
        sc = Standardizer.fit(Z)
        post = vbgmm.fit(sc.apply(Z), hyper, tol=tol, max_iter=max_iter, seed=seed)
        mix = vbgmm.expected_mixture(post, prune_below)
        log.info("category %s: %d samples, %d components", cat, len(ix), mix.n_components)
        return cat, GmrModel(mix), sc

    cats = sorted(fit_groups)
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(fit_one, cats))
    else:
        results = [fit_one(c) for c in cats]
    models = {c: m for c, m, _ in results}
    scalers = {c: s for c, _, s in results}
    merged = {c: t for c, t in target.items() if c != t}
    return CategoricalGmrFuelModel(models, scalers, merged)


# --------------------------------------------------------------------------
# benchmarks


def _lstsq_with_ridge(A: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, bool]:
    """Least squares on column-scaled ``A``; ridge fallback when rank deficient."""
    norms = np.linalg.norm(A, axis=0)
    norms = np.where(norms > 0, norms, 1.0)
    As = A / norms
    rank = np.linalg.matrix_rank(As)
    if rank < A.shape[1]:
        coef = np.linalg.solve(As.T @ As + RIDGE_LAMBDA * np.eye(A.shape[1]), As.T @ y)
        return coef / norms, True
    coef, *_ = np.linalg.lstsq(As, y, rcond=None)
    return coef / norms, False


class AverageSpeedModel(_CategoricalModel):
    """Fuel per metre as a quartic polynomial in average speed, per category."""

    kind = "average_speed"
    DEGREE = 4

    def __init__(self, coefficients: dict[float, Sequence[float]], ridge: Iterable[float] = ()):
        super().__init__()
        self.coefficients = {_category_key(k): np.asarray(v, float) for k, v in coefficients.items()}
        for k, v in self.coefficients.items():
            if v.shape != (self.DEGREE + 1,):
                raise ValidationError(f"category {k}: need {self.DEGREE + 1} coefficients")
        self.ridge = set(ridge)
        self.fit_report: dict = {}

    def _resolve(self, limit):
        if limit not in self.coefficients:
            raise UnknownCategoryError(f"speed-limit category {limit} is not covered by the average-speed model")
        return limit

    def _predict_category(self, cat, F):
        v = F[:, 0]
        per_m = np.polynomial.polynomial.polyval(v, self.coefficients[cat])
        return per_m * F[:, 3]

    @classmethod
    def fit(cls, F: np.ndarray, y: np.ndarray) -> "AverageSpeedModel":
        coefs, ridge = {}, []
        for lim in np.unique(F[:, 4]):
            mask = F[:, 4] == lim
            v = F[mask, 0]
            A = np.vander(v, cls.DEGREE + 1, increasing=True)
            c, used = _lstsq_with_ridge(A, y[mask] / F[mask, 3])
            coefs[float(lim)] = c
            if used:
                log.warning("average-speed model, category %s: rank-deficient design, ridge fallback", lim)
                ridge.append(float(lim))
        return cls(coefs, ridge)

    def to_dict(self) -> dict:
        return {
            "format": "ecoroute.fuel_model",
            "version": BUNDLE_VERSION,
            "kind": self.kind,
            "coefficients": [[k, v.tolist()] for k, v in sorted(self.coefficients.items())],
            "ridge": sorted(self.ridge),
        }

    @classmethod
    def from_dict(cls, blob):
        return cls({k: v for k, v in blob["coefficients"]}, blob.get("ridge", ()))


class PowerBalanceModel(_CategoricalModel):
    """fuel = idle_rate * T + power_slope * max(W, 0).

    T = L / v is the traversal time and W the estimated tractive work at
    steady average speed plus the kinetic-energy change ``m * v * dv``.
    """

    kind = "power_balance"

    def __init__(self, idle_rate: float, power_slope: float, vehicle: VehicleParams = VehicleParams(), ridge=False):
        super().__init__()
        self.idle_rate = float(idle_rate)
        self.power_slope = float(power_slope)
        self.vehicle = vehicle
        self.ridge = bool(ridge)
        self.fit_report: dict = {}

    def _resolve(self, limit):
        return limit

    @staticmethod
    def design(F: np.ndarray, vehicle: VehicleParams) -> tuple[np.ndarray, np.ndarray]:
        v = np.maximum(F[:, 0], MIN_SPEED)
        dv, th, L = F[:, 1], F[:, 2], F[:, 3]
        T = L / v
        m = vehicle.mass
        road = (
            m * G * np.sin(th)
            + 0.5 * vehicle.air_density * vehicle.drag_area_product * v * v
            + vehicle.rolling_coeff * m * G * np.cos(th)
        ) * v
        work = road * T + m * v * dv
        return T, np.maximum(work, 0.0)

    def _predict_category(self, cat, F):
        T, W = self.design(F, self.vehicle)
        return self.idle_rate * T + self.power_slope * W

    @classmethod
    def fit(cls, F: np.ndarray, y: np.ndarray, vehicle: VehicleParams = VehicleParams()) -> "PowerBalanceModel":
        T, W = cls.design(F, vehicle)
        (a, b), ridge = _lstsq_with_ridge(np.column_stack([T, W]), y)
        if ridge:
            log.warning("power-balance model: rank-deficient design, ridge fallback")
        return cls(a, b, vehicle, ridge)

    def to_dict(self) -> dict:
        veh = self.vehicle
        return {
            "format": "ecoroute.fuel_model",
            "version": BUNDLE_VERSION,
            "kind": self.kind,
            "idle_rate_kg_s": self.idle_rate,
            "power_slope_kg_j": self.power_slope,
            "vehicle": {
                "mass": veh.mass,
                "drag_area_product": veh.drag_area_product,
                "rolling_coeff": veh.rolling_coeff,
                "air_density": veh.air_density,
            },
            "ridge": self.ridge,
        }

    @classmethod
    def from_dict(cls, blob):
        veh = VehicleParams(**blob.get("vehicle", {}))
        return cls(blob["idle_rate_kg_s"], blob["power_slope_kg_j"], veh, blob.get("ridge", False))


def _residual_summary(model, F, y) -> dict:
    pred = model.predict_batch(F)
    r = pred - y
    return {"n": int(len(y)), "rmse": float(np.sqrt(np.mean(r * r))), "mean_abs": float(np.mean(np.abs(r)))}


def fit_benchmarks(
    samples: Sequence[tuple[MotionFeatures, float]], vehicle: VehicleParams = VehicleParams()
) -> tuple[AverageSpeedModel, PowerBalanceModel]:
    F = features_to_array([f for f, _ in samples])
    y = np.asarray([fuel for _, fuel in samples], float)
    avg = AverageSpeedModel.fit(F, y)
    pb = PowerBalanceModel.fit(F, y, vehicle)
    avg.fit_report = _residual_summary(avg, F, y)
    pb.fit_report = _residual_summary(pb, F, y)
    return avg, pb


def predict_fuel(model, features: MotionFeatures) -> float:
    return model.predict(features)


FuelModel = CategoricalGmrFuelModel | AverageSpeedModel | PowerBalanceModel

_KINDS = {cls.kind: cls for cls in (CategoricalGmrFuelModel, AverageSpeedModel, PowerBalanceModel)}


def model_from_dict(blob: dict):
    if blob.get("format") != "ecoroute.fuel_model":
        raise ValidationError(f"not a fuel model bundle: format={blob.get('format')!r}")
    if blob.get("version") != BUNDLE_VERSION:
        raise ValidationError(f"unsupported fuel model version {blob.get('version')!r}")
    try:
        cls = _KINDS[blob["kind"]]
    except KeyError:
        raise ValidationError(f"unknown fuel model kind {blob.get('kind')!r}") from None
    return cls.from_dict(blob)


def save_model(model, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_dict(), fh)


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        blob = json.load(fh)
    if isinstance(blob, dict) and "models" in blob:
        return {name: model_from_dict(b) for name, b in blob["models"].items()}
    return model_from_dict(blob)
