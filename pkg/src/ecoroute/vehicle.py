"""Vehicle parameters and longitudinal road-load physics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

G = 9.81
GASOLINE_LHV_MJ_PER_KG = 43.4

# 25..65 mph in 10 mph steps
SPEED_LIMITS = (11.18, 15.65, 20.12, 24.59, 29.06)


@dataclass(frozen=True)
class VehicleParams:
    mass: float = 1246.0  # kg
    max_engine_power: float = 178.7  # kW
    idle_engine_speed: float = 62.8  # rad/s
    drag_area_product: float = 0.65  # m^2, C_d * A
    rolling_coeff: float = 0.009
    willans_slope: float = 0.07  # kg/MJ of tractive work
    idle_fuel_rate: float = 1.8e-4  # kg/s
    air_density: float = 1.2  # kg/m^3
    max_efficiency: float = 0.36

    def __post_init__(self):
        for name in (
            "mass",
            "max_engine_power",
            "idle_engine_speed",
            "drag_area_product",
            "rolling_coeff",
            "willans_slope",
            "idle_fuel_rate",
            "air_density",
        ):
            if not getattr(self, name) > 0:
                raise ValidationError(f"VehicleParams.{name} must be > 0")
        if self.peak_efficiency > self.max_efficiency + 1e-12:
            raise ValidationError(
                f"willans_slope {self.willans_slope} kg/MJ implies efficiency "
                f"{self.peak_efficiency:.3f} above {self.max_efficiency}"
            )

    @property
    def peak_efficiency(self) -> float:
        return 1.0 / (self.willans_slope * GASOLINE_LHV_MJ_PER_KG)

    @property
    def willans_slope_si(self) -> float:
        """Willans slope in kg/J."""
        return self.willans_slope * 1e-6


def tractive_power(v, a, grade, params: VehicleParams):
    """Wheel power in W for speed ``v`` (m/s) and acceleration ``a`` (m/s^2)."""
    m = params.mass
    force = (
        m * a
        + m * G * np.sin(grade)
        + 0.5 * params.air_density * params.drag_area_product * v * v
        + params.rolling_coeff * m * G * np.cos(grade)
    )
    return force * v
