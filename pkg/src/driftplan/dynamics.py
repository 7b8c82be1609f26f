"""Tire friction, nonlinear single-track dynamics, semi-linear bicycle model
and kinematic integration.

Everything here is a pure function and accepts scalars or numpy arrays of
matching shape, so the equilibrium solver and the planner can evaluate
thousands of states in one call.

Sign conventions:
  * slip angles are positive when the contact patch slides to the left of
    the wheel heading; the tire reacts with a restoring (negative-lateral)
    force, hence Fy_i = -Fz_i * mu_y(lambda_i, alpha_i)
  * positive rear slip lambda produces forward drive force Fx_r >= 0
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .params import BicycleParams, InputRanges, TireParams, V_EPS, VehicleParams


class DomainError(ValueError):
    """Slip input outside the friction model's domain."""


class DegenerateSpeedError(ValueError):
    """Speed below the slip-angle singularity floor."""


class WheelLiftError(ValueError):
    """Longitudinal acceleration large enough to unload an axle."""


class ValidityError(ValueError):
    """State outside the linear bicycle model's validity box."""


@dataclass(frozen=True)
class DynamicState:
    v: float        # speed [m/s]
    beta: float     # side-slip angle [rad]
    psidot: float   # yaw rate [rad/s]


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    psi: float      # yaw, wrapped to [0, 2*pi)

    def __post_init__(self):
        object.__setattr__(self, "psi", self.psi % (2.0 * math.pi))


@dataclass(frozen=True)
class ControlInput:
    delta: float    # steering angle [rad]
    lam: float      # rear longitudinal slip [-]


@dataclass(frozen=True)
class AxleForces:
    Fxr: float
    Fyf: float
    Fyr: float
    Fzf: float
    Fzr: float


def mu_combined(lam, alpha, tires: TireParams):
    """Combined-slip friction coefficients (mu_x, mu_y).

    Uses the theoretical slips sigma_x = lam/(1+lam), sigma_y = tan(alpha)/(1+lam)
    and distributes the scalar Magic Formula mu(sigma) isotropically.
    """
    lam = np.asarray(lam, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if np.any(lam <= -1.0):
        raise DomainError("longitudinal slip must exceed -1")
    if np.any(np.abs(alpha) >= math.pi / 2):
        raise DomainError("lateral slip angle must be within (-pi/2, pi/2)")

    sx = lam / (1.0 + lam)
    sy = np.tan(alpha) / (1.0 + lam)
    sigma = np.hypot(sx, sy)
    sB = sigma * tires.B
    mu = tires.D * np.sin(tires.C * np.arctan(sB - tires.E * (sB - np.arctan(sB))))
    with np.errstate(invalid="ignore", divide="ignore"):
        mux = np.where(sigma > 0.0, sx * mu / np.where(sigma > 0, sigma, 1.0), 0.0)
        muy = np.where(sigma > 0.0, sy * mu / np.where(sigma > 0, sigma, 1.0), 0.0)
    if mux.ndim == 0:
        return float(mux), float(muy)
    return mux, muy


def axle_slips(v, beta, psidot, delta, params: VehicleParams):
    """Per-axle lateral slip angles (alpha_f, alpha_r) from the exact
    arctan geometry; reduces to the linear bicycle form for small angles."""
    v = np.asarray(v, dtype=float)
    if np.any(v <= V_EPS):
        raise DegenerateSpeedError(f"speed must exceed {V_EPS} m/s for slip angles")
    vx = v * np.cos(beta)
    vy = v * np.sin(beta)
    af = np.arctan((vy + params.lf * np.asarray(psidot)) / vx) - delta
    ar = np.arctan((vy - params.lr * np.asarray(psidot)) / vx)
    if af.ndim == 0:
        return float(af), float(ar)
    return af, ar


def normal_loads(params: VehicleParams, ax=0.0, check: bool = True):
    """Quasi-static axle loads (Fzf, Fzr) with longitudinal weight transfer."""
    L = params.wheelbase
    ax = np.asarray(ax, dtype=float)
    Fzf = params.m * params.g * params.lr / L - params.m * ax * params.h_cog / L
    Fzr = params.m * params.g * params.lf / L + params.m * ax * params.h_cog / L
    if check and (np.any(Fzf < 0.0) or np.any(Fzr < 0.0)):
        raise WheelLiftError("longitudinal acceleration unloads an axle")
    if Fzf.ndim == 0:
        return float(Fzf), float(Fzr)
    return Fzf, Fzr


def axle_forces(v, beta, psidot, delta, lam, params: VehicleParams, tires: TireParams,
                clip_alpha: bool = False):
    """Tire forces at both axles including one fixed-point pass on the
    longitudinal weight transfer (ax starts at 0, then takes Fxr/m).

    ``clip_alpha`` saturates slip angles just inside the friction model's
    domain instead of raising; root finders use it to survive hopeless
    intermediate iterates (the force is fully saturated there anyway).
    """
    af, ar = axle_slips(v, beta, psidot, delta, params)
    if clip_alpha:
        bound = math.pi / 2 - 1e-3
        af = np.clip(af, -bound, bound)
        ar = np.clip(ar, -bound, bound)
    ax = np.zeros_like(np.asarray(v, dtype=float))
    for _ in range(2):
        Fzf, Fzr = normal_loads(params, ax, check=False)
        _, muyf = mu_combined(0.0 * np.asarray(lam), af, tires)
        muxr, muyr = mu_combined(lam, ar, tires)
        Fyf = -Fzf * muyf
        Fyr = -Fzr * muyr
        Fxr = Fzr * muxr   # front longitudinal force is zero (RWD)
        ax = Fxr / params.m
    return Fxr, Fyf, Fyr, Fzf, Fzr


def nonlinear_derivatives(v, beta, psidot, delta, lam,
                          params: VehicleParams, tires: TireParams,
                          exact: bool = False, clip_alpha: bool = False):
    """(v_dot, beta_dot, psiddot) of the nonlinear single-track model.

    Default form follows the balance equations as used throughout the
    planner; ``exact=True`` switches to the exact velocity-frame equations
    (with cos(delta) force projection) for sensitivity checks.
    """
    Fxr, Fyf, Fyr, _, _ = axle_forces(v, beta, psidot, delta, lam, params, tires,
                                      clip_alpha=clip_alpha)
    v = np.asarray(v, dtype=float)
    beta = np.asarray(beta, dtype=float)
    psidot = np.asarray(psidot, dtype=float)
    delta = np.asarray(delta, dtype=float)
    m, Jz = params.m, params.Jz
    if exact:
        Fx = Fxr - Fyf * np.sin(delta)
        Fy = Fyf * np.cos(delta) + Fyr
        vdot = (Fx * np.cos(beta) + Fy * np.sin(beta)) / m
        betadot = (Fy * np.cos(beta) - Fx * np.sin(beta)) / (m * v) - psidot
        psiddot = (params.lf * Fyf * np.cos(delta) - params.lr * Fyr) / Jz
    else:
        vdot = psidot * v * beta + Fxr / m
        betadot = (Fyf + Fyr) / (m * v) - psidot
        psiddot = (params.lf * Fyf - params.lr * Fyr) / Jz
    if vdot.ndim == 0:
        return float(vdot), float(betadot), float(psiddot)
    return vdot, betadot, psiddot


def bicycle_derivatives(v, beta, psidot, delta, lam,
                        params: VehicleParams, bike: BicycleParams,
                        check: bool = True):
    """(v_dot, beta_dot, psiddot) of the semi-linearized bicycle model.

    Lateral forces are linear in the axle slip; the rear longitudinal force
    is linear in the slip ratio with positive slip driving the vehicle
    forward, matching the Magic Formula's sign.
    """
    v = np.asarray(v, dtype=float)
    beta = np.asarray(beta, dtype=float)
    psidot = np.asarray(psidot, dtype=float)
    if check:
        if np.any(np.abs(beta) >= bike.beta_lin) or np.any(np.abs(psidot) >= bike.psidot_lin):
            raise ValidityError("state outside the linear validity box")
        if np.any(v <= V_EPS):
            raise DegenerateSpeedError(f"speed must exceed {V_EPS} m/s")
    veff = np.maximum(v, V_EPS)
    Fyf = -bike.Cf * (beta + params.lf * psidot / veff - delta)
    Fyr = -bike.Cr * (beta - params.lr * psidot / veff)
    Fxr = bike.Cx * np.asarray(lam, dtype=float)
    m, Jz = params.m, params.Jz
    vdot = psidot * veff * beta + Fxr / m
    betadot = (Fyf + Fyr) / (m * veff) - psidot
    psiddot = (params.lf * Fyf - params.lr * Fyr) / Jz
    if vdot.ndim == 0:
        return float(vdot), float(betadot), float(psiddot)
    return vdot, betadot, psiddot


def integrate_primitive(x0, y0, psi0, v_profile, beta_profile, psidot_profile, dt: float):
    """Explicit-Euler kinematic rollout.

    The dynamic triple follows the supplied per-step profiles (shape
    (steps,) or batched (P, steps)); returns (x, y, psi) arrays with one
    more sample than steps (the start pose included). psi is unwrapped.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    v = np.atleast_2d(np.asarray(v_profile, dtype=float))
    beta = np.atleast_2d(np.asarray(beta_profile, dtype=float))
    pd = np.atleast_2d(np.asarray(psidot_profile, dtype=float))
    if not (v.shape == beta.shape == pd.shape):
        raise ValueError("profiles must share one shape")
    P, n = v.shape
    psi = np.empty((P, n + 1))
    psi[:, 0] = psi0
    np.cumsum(pd * dt, axis=1, out=psi[:, 1:])
    psi[:, 1:] += np.asarray(psi0, dtype=float).reshape(-1, 1) if np.ndim(psi0) else psi0

    course = psi[:, :-1] + beta
    x = np.empty((P, n + 1))
    y = np.empty((P, n + 1))
    x[:, 0] = x0
    y[:, 0] = y0
    np.cumsum(v * np.cos(course) * dt, axis=1, out=x[:, 1:])
    np.cumsum(v * np.sin(course) * dt, axis=1, out=y[:, 1:])
    x[:, 1:] += np.asarray(x0, dtype=float).reshape(-1, 1) if np.ndim(x0) else x0
    y[:, 1:] += np.asarray(y0, dtype=float).reshape(-1, 1) if np.ndim(y0) else y0

    if np.ndim(v_profile) == 1:
        return x[0], y[0], psi[0]
    return x, y, psi


def fit_bicycle_params(params: VehicleParams, tires: TireParams,
                       beta_lin: float = 0.15, psidot_lin: float = 0.5,
                       ranges: InputRanges | None = None,
                       v_ref: float = 10.0) -> BicycleParams:
    """Least-squares fit of the axle stiffnesses against the Magic Formula
    forces at static loads over the linear validity box."""
    ranges = ranges or InputRanges()
    Fzf0, Fzr0 = normal_loads(params)

    alpha_max = beta_lin + params.lf * psidot_lin / v_ref + 0.5 * ranges.delta_max
    alphas = np.linspace(-alpha_max, alpha_max, 201)
    _, muy = mu_combined(np.zeros_like(alphas), alphas, tires)

    def slope(x, y):
        return float(np.dot(x, y) / np.dot(x, x))

    Cf = Fzf0 * slope(alphas, muy)
    Cr = Fzr0 * slope(alphas, muy)

    lams = np.linspace(ranges.lambda_min, ranges.lambda_max, 201)
    lams = lams[np.abs(lams) > 1e-9]
    mux, _ = mu_combined(lams, np.zeros_like(lams), tires)
    Cx = Fzr0 * slope(lams, mux)

    return BicycleParams(Cf=Cf, Cr=Cr, Cx=Cx, beta_lin=beta_lin, psidot_lin=psidot_lin)
