"""Parameter dataclasses for the vehicle, tires and the semi-linear bicycle model.

All physical parameters live here as configuration, never as constants
sprinkled through the code. JSON load/save round-trips field names 1:1.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path


@dataclass(frozen=True)
class TireParams:
    """Magic Formula coefficients (isotropic combined-slip form).

    Defaults correspond to a gravel surface.
    """

    B: float = 1.5289   # stiffness factor
    C: float = 1.0901   # shape factor
    D: float = 0.6      # peak friction coefficient
    E: float = -0.95084  # curvature factor

    def __post_init__(self):
        if self.B <= 0 or self.D <= 0:
            raise ValueError("tire stiffness B and peak friction D must be positive")


@dataclass(frozen=True)
class VehicleParams:
    """Single-track (bicycle) chassis parameters of an RWD rally car."""

    m: float = 1300.0      # mass [kg]
    Jz: float = 1900.0     # yaw inertia [kg m^2]
    lf: float = 1.3        # COG to front axle [m]
    lr: float = 1.3        # COG to rear axle [m]
    h_cog: float = 0.5     # COG height, longitudinal weight transfer [m]
    g: float = 9.81        # gravity [m/s^2]

    def __post_init__(self):
        for name in ("m", "Jz", "lf", "lr", "h_cog", "g"):
            if getattr(self, name) <= 0:
                raise ValueError(f"vehicle parameter {name} must be positive")

    @property
    def wheelbase(self) -> float:
        return self.lf + self.lr


@dataclass(frozen=True)
class BicycleParams:
    """Linearized axle stiffnesses and the validity box of the linear model.

    Stiffnesses should be fitted against the Magic Formula over the validity
    box (see :func:`driftplan.dynamics.fit_bicycle_params`) so the two models
    agree where both apply.
    """

    Cf: float              # front cornering stiffness [N/rad]
    Cr: float              # rear cornering stiffness [N/rad]
    Cx: float              # longitudinal stiffness [N per unit slip]
    beta_lin: float = 0.15    # |beta| validity bound [rad]
    psidot_lin: float = 0.5   # |psidot| validity bound [rad/s]

    def __post_init__(self):
        if min(self.Cf, self.Cr, self.Cx) <= 0:
            raise ValueError("axle stiffnesses must be positive")
        if self.beta_lin <= 0 or self.psidot_lin <= 0:
            raise ValueError("validity bounds must be positive")


@dataclass(frozen=True)
class InputRanges:
    """Admissible control input intervals, mirroring the input surfaces of
    the equilibrium manifold; the bicycle-mode expansion samples inside them."""

    delta_min: float = -0.5
    delta_max: float = 0.5
    lambda_min: float = -0.2
    lambda_max: float = 0.3


# speed floor below which slip angles are singular; states under it are
# handled only by the linear mode with slip angles clamped to zero
V_EPS = 0.5


def _load_json(path: str | Path) -> dict:
    with open(path) as f:
        return json.load(f)


def load_tire_params(path: str | Path) -> TireParams:
    return TireParams(**_load_json(path))


def load_vehicle_params(path: str | Path) -> VehicleParams:
    return VehicleParams(**_load_json(path))


def load_bicycle_params(path: str | Path) -> BicycleParams:
    return BicycleParams(**_load_json(path))


def save_params(obj, path: str | Path) -> None:
    with open(path, "w") as f:
        json.dump(asdict(obj), f, indent=2, sort_keys=True)
        f.write("\n")
