"""Equilibrium manifold of steady-state drifting solutions.

Offline, all steady cornering solutions of the nonlinear single-track model
are found per curvature radius by a batched damped-Newton iteration and
interpolated into lattice maps v, delta, lambda over the (beta, psidot)
plane. Online, the planner projects states onto the manifold and samples
its neighborhood to generate drift primitives.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.interpolate import LinearNDInterpolator
from scipy.spatial import cKDTree

from .dynamics import nonlinear_derivatives
from .params import TireParams, V_EPS, VehicleParams

# residual normalization: beta_dot in rad/s scaled by a reference speed,
# psi_ddot by a reference time, so the three components share units
V_NORM = 10.0
T_NORM = 1.0
EPS_EQ = 1e-6

R_C_MIN = 10.0
DEFAULT_RADII = (10.0, 12.0, 15.0, 20.0, 30.0, 50.0, 70.0, 100.0)


class ManifoldError(RuntimeError):
    pass


class HashMismatchError(ManifoldError):
    """Manifold file built against different vehicle/tire parameters."""


@dataclass(frozen=True)
class EquilibriumPoint:
    v: float        # steady speed [m/s]
    beta: float     # steady side-slip [rad]
    psidot: float   # steady yaw rate [rad/s]
    delta: float    # steering input holding the state [rad]
    lam: float      # rear slip input holding the state [-]
    Rc: float       # signed curvature radius [m]


@dataclass(frozen=True)
class SamplePattern:
    """Ring sampling pattern around a manifold point, in range-normalized
    (beta, psidot) distance, plus the per-step rate caps."""

    ring_radii: tuple = (0.05, 0.12, 0.25)
    ring_counts: tuple = (8, 8, 4)
    dv_max: float = 2.9         # [m/s] per step
    dbeta_max: float = 0.3      # [rad] per step
    dpsidot_max: float = 0.5    # [rad/s] per step
    Ts: float = 0.5             # primitive duration [s]
    a_max: float = 5.886        # max deceleration on the surface [m/s^2]

    def __post_init__(self):
        if len(self.ring_radii) != len(self.ring_counts):
            raise ValueError("ring radii and counts must pair up")
        dens = [c / r for c, r in zip(self.ring_counts, self.ring_radii) if r > 0.0]
        if any(a < b - 1e-12 for a, b in zip(dens, dens[1:])):
            raise ValueError("ring sample density must not increase with radius")


def residual(v, beta, psidot, delta, lam, params: VehicleParams, tires: TireParams):
    """Normalized max-residual of the steady-state condition."""
    vdot, betadot, psiddot = nonlinear_derivatives(v, beta, psidot, delta, lam, params, tires)
    return np.maximum.reduce([
        np.abs(np.asarray(vdot)),
        np.abs(np.asarray(betadot)) * V_NORM,
        np.abs(np.asarray(psiddot)) * T_NORM,
    ])


def _residual_vec(z, delta, Rc, params, tires):
    """Stacked residual for unknowns z = (v, beta, lam) at fixed (delta, Rc)."""
    v, beta, lam = z[..., 0], z[..., 1], z[..., 2]
    psidot = v / Rc
    vdot, betadot, psiddot = nonlinear_derivatives(v, beta, psidot, delta, lam,
                                                   params, tires, clip_alpha=True)
    return np.stack([np.asarray(vdot),
                     np.asarray(betadot) * V_NORM,
                     np.asarray(psiddot) * T_NORM], axis=-1)


def _clamp(z):
    z[..., 0] = np.clip(z[..., 0], V_EPS + 0.05, 60.0)
    z[..., 1] = np.clip(z[..., 1], -1.2, 1.2)
    z[..., 2] = np.clip(z[..., 2], -0.9, 2.5)
    return z


def _newton_batch(z0, delta, Rc, params, tires, max_iter=100, tol=1e-10):
    """Damped Newton with finite-difference Jacobian over a batch of seeds.

    Seeds that wander out of bounds are clamped back; non-converged seeds
    are simply reported with their final residual.
    """
    z = _clamp(z0.copy())
    h = 1e-7
    for _ in range(max_iter):
        F = _residual_vec(z, delta, Rc, params, tires)
        norm = np.linalg.norm(F, axis=-1)
        if np.all(norm < tol):
            break
        J = np.empty(z.shape[:-1] + (3, 3))
        for j in range(3):
            zp = z.copy()
            zp[..., j] += h
            J[..., :, j] = (_residual_vec(zp, delta, Rc, params, tires) - F) / h
        ok = np.isfinite(J).all(axis=(-2, -1)) & np.isfinite(F).all(axis=-1)
        step = np.zeros_like(z)
        if ok.any():
            try:
                step[ok] = np.linalg.solve(J[ok], F[ok][..., None])[..., 0]
            except np.linalg.LinAlgError:
                for idx in np.argwhere(ok)[:, 0]:
                    try:
                        step[idx] = np.linalg.solve(J[idx], F[idx])
                    except np.linalg.LinAlgError:
                        ok[idx] = False
        # backtracking: pick the best of a few damping factors per seed
        best_z = z.copy()
        best_norm = norm.copy()
        for alpha in (1.0, 0.5, 0.25, 0.1):
            cand = _clamp(z - alpha * step)
            cn = np.linalg.norm(_residual_vec(cand, delta, Rc, params, tires), axis=-1)
            better = ok & np.isfinite(cn) & (cn < best_norm)
            best_z[better] = cand[better]
            best_norm[better] = cn[better]
        z = best_z
    F = _residual_vec(z, delta, Rc, params, tires)
    return z, np.linalg.norm(F, axis=-1)


def solve_equilibria(Rc: float, params: VehicleParams, tires: TireParams,
                     n_delta: int = 20, n_lam: int = 20) -> list[EquilibriumPoint]:
    """All steady-state cornering solutions at one signed curvature radius.

    Sweeps the steering angle and solves the three balance equations for
    (v, beta, lambda) with psidot = v / Rc imposed. Solutions slower than
    the speed floor or with beta and psidot of equal sign are discarded.
    """
    if abs(Rc) < R_C_MIN:
        raise ValueError(f"|Rc| must be at least {R_C_MIN} m")
    if Rc < 0:
        return [_mirror(p) for p in solve_equilibria(-Rc, params, tires, n_delta, n_lam)]

    mu_g = tires.D * params.g
    v_ref = np.sqrt(mu_g * Rc)
    deltas = np.linspace(-0.6, 0.6, n_delta)
    lam_seeds = np.linspace(0.0, 1.2, n_lam)
    beta_seeds = np.array([-0.05, -0.3, -0.7])
    v_seeds = np.array([0.6, 1.0]) * v_ref

    L, B, V = np.meshgrid(lam_seeds, beta_seeds, v_seeds, indexing="ij")
    seeds = np.stack([V.ravel(), B.ravel(), L.ravel()], axis=-1)

    sols = []
    for delta in deltas:
        z, res = _newton_batch(seeds, delta, Rc, params, tires)
        good = res < 1e-10
        for v, beta, lam in z[good]:
            psidot = v / Rc
            if v <= V_EPS or beta * psidot > 0.0:
                continue
            try:
                # strict recheck without the solver's slip-angle clamp
                if residual(v, beta, psidot, delta, lam, params, tires) >= EPS_EQ:
                    continue
            except ValueError:
                continue
            sols.append((v, beta, psidot, delta, lam))

    # dedupe converged branches per radius
    out = []
    seen = set()
    for v, beta, psidot, delta, lam in sorted(sols):
        key = (round(v, 4), round(beta, 4), round(delta, 4), round(lam, 4))
        if key in seen:
            continue
        seen.add(key)
        out.append(EquilibriumPoint(float(v), float(beta), float(psidot),
                                    float(delta), float(lam), float(Rc)))
    return out


def _mirror(p: EquilibriumPoint) -> EquilibriumPoint:
    # turn-direction mirror: v even, delta odd, and lambda even -- the drive
    # slip is thrust, not a turning input (sigma_x does not change sign and
    # the psidot*v*beta coupling term is mirror-even)
    return EquilibriumPoint(p.v, -p.beta, -p.psidot, -p.delta, p.lam, -p.Rc)


@dataclass
class LatticeConfig:
    beta_range: tuple = (-1.0, 1.0)
    psidot_range: tuple = (-1.5, 1.5)
    resolution: int = 121


@dataclass
class ESManifold:
    """Lattice-interpolated equilibrium maps over the (beta, psidot) plane."""

    beta_axis: np.ndarray
    psidot_axis: np.ndarray
    v_map: np.ndarray       # (n_beta, n_psidot)
    delta_map: np.ndarray
    lam_map: np.ndarray
    mask: np.ndarray        # bool, True where the manifold is defined
    points: list            # the equilibrium points the lattice was built from
    param_hash: str
    _tree: cKDTree = field(default=None, repr=False, compare=False)
    _tree_idx: np.ndarray = field(default=None, repr=False, compare=False)

    @property
    def beta_scale(self) -> float:
        return float(self.beta_axis[-1] - self.beta_axis[0])

    @property
    def psidot_scale(self) -> float:
        return float(self.psidot_axis[-1] - self.psidot_axis[0])

    def _ensure_tree(self):
        if self._tree is None:
            idx = np.argwhere(self.mask)
            pts = np.column_stack([
                self.beta_axis[idx[:, 0]] / self.beta_scale,
                self.psidot_axis[idx[:, 1]] / self.psidot_scale,
            ])
            self._tree = cKDTree(pts)
            self._tree_idx = idx

    def _cell(self, beta, psidot):
        db = self.beta_axis[1] - self.beta_axis[0]
        dp = self.psidot_axis[1] - self.psidot_axis[0]
        i = np.floor((np.asarray(beta) - self.beta_axis[0]) / db).astype(int)
        j = np.floor((np.asarray(psidot) - self.psidot_axis[0]) / dp).astype(int)
        return i, j, db, dp

    def contains(self, beta, psidot):
        """True where (beta, psidot) lies in a fully masked-in lattice cell."""
        nb, npd = self.mask.shape
        if np.isscalar(beta) or np.ndim(beta) == 0:
            i = int(math.floor((float(beta) - self.beta_axis[0])
                               / (self.beta_axis[1] - self.beta_axis[0])))
            j = int(math.floor((float(psidot) - self.psidot_axis[0])
                               / (self.psidot_axis[1] - self.psidot_axis[0])))
            if not (0 <= i < nb - 1 and 0 <= j < npd - 1):
                return False
            return bool(self.mask[i, j] and self.mask[i + 1, j]
                        and self.mask[i, j + 1] and self.mask[i + 1, j + 1])
        beta = np.asarray(beta, dtype=float)
        psidot = np.asarray(psidot, dtype=float)
        i, j, _, _ = self._cell(beta, psidot)
        inside = (i >= 0) & (i < nb - 1) & (j >= 0) & (j < npd - 1)
        ic = np.clip(i, 0, nb - 2)
        jc = np.clip(j, 0, npd - 2)
        return inside & (self.mask[ic, jc] & self.mask[ic + 1, jc]
                         & self.mask[ic, jc + 1] & self.mask[ic + 1, jc + 1])

    def interpolate(self, beta, psidot):
        """Bilinear (v, delta, lam) at an in-domain query."""
        i, j, db, dp = self._cell(beta, psidot)
        tb = (np.asarray(beta) - self.beta_axis[i]) / db
        tp = (np.asarray(psidot) - self.psidot_axis[j]) / dp

        def bilin(layer):
            return ((1 - tb) * (1 - tp) * layer[i, j] + tb * (1 - tp) * layer[i + 1, j]
                    + (1 - tb) * tp * layer[i, j + 1] + tb * tp * layer[i + 1, j + 1])

        return bilin(self.v_map), bilin(self.delta_map), bilin(self.lam_map)

    def project(self, beta: float, psidot: float) -> EquilibriumPoint:
        """Nearest manifold point in range-scaled distance; the identity on
        (beta, psidot) when the query is already inside the domain."""
        if not self.mask.any():
            raise ManifoldError("empty manifold")
        if self.contains(beta, psidot):
            v, d, l = self.interpolate(beta, psidot)
            b, p = float(beta), float(psidot)
        else:
            self._ensure_tree()
            _, k = self._tree.query([beta / self.beta_scale, psidot / self.psidot_scale])
            i, j = self._tree_idx[k]
            b, p = float(self.beta_axis[i]), float(self.psidot_axis[j])
            v, d, l = self.v_map[i, j], self.delta_map[i, j], self.lam_map[i, j]
        Rc = float(v / p) if p != 0.0 else float("inf")
        return EquilibriumPoint(float(v), b, p, float(d), float(l), Rc)

    def neighborhood_arrays(self, center: EquilibriumPoint,
                            pattern: SamplePattern):
        """(v, beta, psidot, delta, lam) arrays of the ring samples around
        the center, filtered to the manifold domain and to the per-step
        rate caps relative to the center; the center itself is excluded."""
        ub, up = _ring_offsets(pattern.ring_radii, pattern.ring_counts)
        empty = (np.empty(0),) * 5
        if ub.size == 0:
            return empty
        b = center.beta + self.beta_scale * ub
        p = center.psidot + self.psidot_scale * up
        ok = self.contains(b, p)
        b, p = b[ok], p[ok]
        if len(b) == 0:
            return empty
        v, d, l = self.interpolate(b, p)
        keep = ((np.abs(v - center.v) <= pattern.dv_max)
                & (np.abs(b - center.beta) <= pattern.dbeta_max)
                & (np.abs(p - center.psidot) <= pattern.dpsidot_max)
                & (np.abs(v - center.v) / pattern.Ts < pattern.a_max))
        return v[keep], b[keep], p[keep], d[keep], l[keep]

    def sample_neighborhood(self, center: EquilibriumPoint,
                            pattern: SamplePattern) -> list[EquilibriumPoint]:
        """Ring samples around the center as equilibrium points; falls back
        to the center alone when every sample is filtered out."""
        v, b, p, d, l = self.neighborhood_arrays(center, pattern)
        out = []
        for vi, bi, pi, di, li in zip(v, b, p, d, l):
            Rc = float(vi / pi) if pi != 0.0 else float("inf")
            out.append(EquilibriumPoint(float(vi), float(bi), float(pi),
                                        float(di), float(li), Rc))
        if not out:
            return [center]
        return out


@lru_cache(maxsize=None)
def _ring_offsets(radii: tuple, counts: tuple):
    """Unit-scale (beta, psidot) ring offsets for a sampling pattern."""
    bs, ps = [], []
    for r, count in zip(radii, counts):
        if r == 0.0 or count == 0:
            continue
        angles = 2.0 * np.pi * np.arange(count) / count
        bs.append(r * np.cos(angles))
        ps.append(r * np.sin(angles))
    if not bs:
        return np.empty(0), np.empty(0)
    return np.concatenate(bs), np.concatenate(ps)


def params_hash(params: VehicleParams, tires: TireParams,
                radii, lattice: LatticeConfig) -> str:
    blob = json.dumps({
        "vehicle": asdict(params),
        "tires": asdict(tires),
        "radii": list(radii),
        "lattice": asdict(lattice),
    }, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def build_manifold(radii, params: VehicleParams, tires: TireParams,
                   lattice: LatticeConfig | None = None) -> ESManifold:
    """Solve equilibria per radius (both turn directions), scatter into the
    (beta, psidot) plane and linearly interpolate onto the lattice.

    The mask covers the convex region spanned by the solution points minus
    the excluded beta*psidot > 0 quadrants; layers are exactly symmetrized
    (v even, delta and lambda odd)."""
    lattice = lattice or LatticeConfig()
    radii = sorted(radii)
    if len(radii) < 3:
        raise ManifoldError("need at least 3 radii")
    if radii[0] < R_C_MIN:
        raise ManifoldError(f"radii must be at least {R_C_MIN} m")

    points = []
    for R in radii:
        sols = solve_equilibria(R, params, tires)
        if len(sols) < 2:
            raise ManifoldError(f"insufficient equilibrium points at radius {R} m")
        points.extend(sols)
        points.extend(_mirror(p) for p in sols)
    points.sort(key=lambda p: (p.Rc, p.delta, p.beta, p.v))

    xy = np.array([[p.beta, p.psidot] for p in points])
    vals = np.array([[p.v, p.delta, p.lam] for p in points])
    interp = LinearNDInterpolator(xy, vals)

    ba = np.linspace(*lattice.beta_range, lattice.resolution)
    pa = np.linspace(*lattice.psidot_range, lattice.resolution)
    BB, PP = np.meshgrid(ba, pa, indexing="ij")
    grid_vals = interp(np.column_stack([BB.ravel(), PP.ravel()]))
    grid_vals = grid_vals.reshape(lattice.resolution, lattice.resolution, 3)

    mask = np.isfinite(grid_vals).all(axis=-1) & ~(BB * PP > 0.0)
    v_map = np.where(mask, grid_vals[..., 0], 0.0)
    d_map = np.where(mask, grid_vals[..., 1], 0.0)
    l_map = np.where(mask, grid_vals[..., 2], 0.0)

    # enforce the point symmetry exactly (v and lambda even; delta odd)
    flip = (slice(None, None, -1), slice(None, None, -1))
    mask &= mask[flip]
    v_map = np.where(mask, 0.5 * (v_map + v_map[flip]), 0.0)
    d_map = np.where(mask, 0.5 * (d_map - d_map[flip]), 0.0)
    l_map = np.where(mask, 0.5 * (l_map + l_map[flip]), 0.0)

    return ESManifold(ba, pa, v_map, d_map, l_map, mask, points,
                      params_hash(params, tires, radii, lattice))


def _b64(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a).tobytes()).decode()


def save_manifold(m: ESManifold, path: str | Path) -> None:
    n = len(m.beta_axis)
    doc = {
        "format": "driftplan-esm-1",
        "param_hash": m.param_hash,
        "beta_range": [float(m.beta_axis[0]), float(m.beta_axis[-1])],
        "psidot_range": [float(m.psidot_axis[0]), float(m.psidot_axis[-1])],
        "resolution": n,
        "v": _b64(m.v_map),
        "delta": _b64(m.delta_map),
        "lam": _b64(m.lam_map),
        "mask": _b64(m.mask.astype(np.uint8)),
        "points": [asdict(p) for p in m.points],
    }
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True)
        f.write("\n")


def load_manifold(path: str | Path, expected_hash: str | None = None) -> ESManifold:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != "driftplan-esm-1":
        raise ManifoldError(f"unrecognized manifold file: {path}")
    if expected_hash is not None and doc["param_hash"] != expected_hash:
        raise HashMismatchError(
            f"manifold was built for different parameters "
            f"({doc['param_hash']} != {expected_hash})")
    n = doc["resolution"]

    def arr(key, dtype=np.float64):
        return np.frombuffer(base64.b64decode(doc[key]), dtype=dtype).reshape(n, n).copy()

    return ESManifold(
        np.linspace(*doc["beta_range"], n),
        np.linspace(*doc["psidot_range"], n),
        arr("v"), arr("delta"), arr("lam"),
        arr("mask", np.uint8).astype(bool),
        [EquilibriumPoint(**p) for p in doc["points"]],
        doc["param_hash"],
    )


def export_points_csv(m: ESManifold, path: str | Path) -> None:
    with open(path, "w") as f:
        f.write("beta,psidot,v,delta,lam,Rc\n")
        for p in m.points:
            f.write(f"{p.beta:.9g},{p.psidot:.9g},{p.v:.9g},"
                    f"{p.delta:.9g},{p.lam:.9g},{p.Rc:.9g}\n")
