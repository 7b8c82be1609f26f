"""Arc-length-parameterized road model.

The centerline is a sampled polyline (spacing <= 0.5 m) with per-sample
arc length, unwrapped heading and curvature. Frenet queries project onto
the nearest segment; batch queries go through a KD-tree so the planner can
collision-check hundreds of poses per expansion in one call.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from ._kernels import HAVE_NUMBA, frenet_lookup_invert


class OutOfCorridorError(ValueError):
    """Query point farther from the centerline than the road corridor."""


class FoldOverError(ValueError):
    """Lateral offset beyond the local curvature radius."""


@dataclass(frozen=True)
class FrenetState:
    s: float   # distance along road [m]
    d: float   # lateral deviation, positive left of travel direction [m]


@dataclass(frozen=True)
class FootprintCircles:
    """Vehicle footprint as circles along the longitudinal axis."""

    offsets: tuple = (-1.3, 0.0, 1.3)   # from COG [m]
    radius: float = 1.0                 # common circle radius [m]

    def __post_init__(self):
        if len(self.offsets) < 1 or self.radius <= 0:
            raise ValueError("footprint needs at least one circle of positive radius")


class Track:
    def __init__(self, centerline: np.ndarray, width: float, closed: bool):
        """centerline: (N, 2) array of approximately uniformly spaced samples."""
        xy = np.asarray(centerline, dtype=float)
        if xy.ndim != 2 or xy.shape[1] != 2 or len(xy) < 2:
            raise ValueError("centerline must be an (N, 2) array, N >= 2")
        if width <= 0:
            raise ValueError("road width must be positive")
        if closed:
            gap = np.linalg.norm(xy[0] - xy[-1])
            spacing = np.linalg.norm(np.diff(xy, axis=0), axis=1).max()
            if gap > 2 * spacing:
                raise ValueError("closed track must end near its start")
            if gap > 1e-9:
                xy = np.vstack([xy, xy[0]])

        self.xy = xy
        self.width = float(width)
        self.closed = bool(closed)

        seg = np.diff(xy, axis=0)
        seg_len = np.linalg.norm(seg, axis=1)
        if np.any(seg_len <= 0):
            raise ValueError("centerline has duplicate consecutive samples")
        self.s = np.concatenate([[0.0], np.cumsum(seg_len)])
        self.length = float(self.s[-1])

        self._seg = seg
        self._seg_len = seg_len

        heading = np.arctan2(seg[:, 1], seg[:, 0])
        heading = np.unwrap(heading)
        # per-sample heading: segment headings averaged at interior samples
        psi = np.empty(len(xy))
        psi[1:-1] = 0.5 * (heading[:-1] + heading[1:])
        if self.closed:
            # seam sample averages the last and first segment like any
            # interior one; total advance over a lap is the full winding
            turns = round((heading[-1] - heading[0]) / (2 * math.pi))
            psi[0] = 0.5 * (heading[0] + heading[-1] - turns * 2 * math.pi)
            psi[-1] = psi[0] + turns * 2 * math.pi
        else:
            psi[0] = heading[0]
            psi[-1] = heading[-1]
        self.heading = psi
        ds = np.gradient(self.s)
        self.curvature = np.gradient(psi) / ds
        # per-sample left normals define a ruled (s, d) chart that is exactly
        # invertible, unlike raw nearest-segment projection which is ambiguous
        # near vertices on the concave side
        self._normals = np.column_stack([-np.sin(psi), np.cos(psi)])

        self._tree = cKDTree(xy[:-1] if self.closed else xy)
        self._n_pts = len(self._tree.data)
        self._grid = None     # lazy nearest-sample lookup grid for the kernel

    # -- construction helpers -------------------------------------------------

    @classmethod
    def straight(cls, length: float, width: float = 10.0, spacing: float = 0.5):
        n = max(2, int(round(length / spacing)) + 1)
        x = np.linspace(0.0, length, n)
        return cls(np.column_stack([x, np.zeros(n)]), width, closed=False)

    @classmethod
    def circle(cls, radius: float, width: float = 10.0, spacing: float = 0.5):
        n = max(8, int(round(2 * math.pi * radius / spacing)))
        th = np.linspace(0.0, 2 * math.pi, n, endpoint=False)
        xy = np.column_stack([radius * np.sin(th), radius * (1 - np.cos(th))])
        return cls(xy, width, closed=True)

    @classmethod
    def from_segments(cls, segments, width: float = 10.0, closed: bool = False,
                      spacing: float = 0.5):
        """Build from a turtle-style list of ('straight', length) and
        ('arc', radius, angle) pieces; positive angle turns left."""
        pts = [np.array([0.0, 0.0])]
        psi = 0.0
        for seg in segments:
            if seg[0] == "straight":
                length = seg[1]
                n = max(1, int(round(length / spacing)))
                step = length / n
                d = np.array([math.cos(psi), math.sin(psi)])
                for _ in range(n):
                    pts.append(pts[-1] + step * d)
            elif seg[0] == "arc":
                _, radius, angle = seg
                arc_len = abs(angle) * radius
                n = max(2, int(round(arc_len / spacing)))
                sign = 1.0 if angle > 0 else -1.0
                center = pts[-1] + radius * np.array([-math.sin(psi), math.cos(psi)]) * sign
                th0 = math.atan2(pts[-1][1] - center[1], pts[-1][0] - center[0])
                for i in range(1, n + 1):
                    th = th0 + sign * abs(angle) * i / n
                    pts.append(center + radius * np.array([math.cos(th), math.sin(th)]))
                psi += angle
            else:
                raise ValueError(f"unknown segment kind {seg[0]!r}")
        xy = np.array(pts)
        if closed:
            xy = xy[:-1] if np.linalg.norm(xy[-1] - xy[0]) < 1e-6 else xy
            xy = np.vstack([xy, xy[0]])
        return cls(xy, width, closed=closed)

    # -- queries --------------------------------------------------------------

    def wrap_s(self, s):
        return np.mod(s, self.length) if self.closed else s

    @staticmethod
    def _cross(a, b):
        return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]

    def _invert_cell(self, pts, i):
        """Solve pts = a + u*E + d*(n_i + u*(n_{i+1} - n_i)) on cell(s) i.

        Returns (s, d, u_raw, resid) where resid measures how far the
        clamped-u reconstruction misses the point (zero when u in [0, 1])."""
        ax, ay = self.xy[i, 0], self.xy[i, 1]
        ex, ey = self._seg[i, 0], self._seg[i, 1]
        nx, ny = self._normals[i, 0], self._normals[i, 1]
        dnx = self._normals[i + 1, 0] - nx
        dny = self._normals[i + 1, 1] - ny
        qx = pts[..., 0] - ax
        qy = pts[..., 1] - ay
        # cross(q - uE, n0 + u*dn) = 0  ->  A u^2 + B u + C = 0 with small A
        A = -(ex * dny - ey * dnx)
        B = (qx * dny - qy * dnx) - (ex * ny - ey * nx)
        C = qx * ny - qy * nx
        u = -C / B
        for _ in range(2):                      # Newton; |A/B| << 1
            u = u - (A * u * u + B * u + C) / (2.0 * A * u + B)
        uc = np.clip(u, 0.0, 1.0)
        wx = nx + uc * dnx
        wy = ny + uc * dny
        rx = qx - uc * ex
        ry = qy - uc * ey
        d = (rx * wx + ry * wy) / (wx * wx + wy * wy)
        resid = np.hypot(rx - d * wx, ry - d * wy)
        s = self.s[i] + uc * self._seg_len[i]
        return s, d, u, resid

    def _ensure_grid(self, h: float = 1.0):
        """Uniform spatial grid holding the nearest centerline sample of
        each cell center; seeds the kernel's nearest-sample hill-climb."""
        if self._grid is not None:
            return
        pts = np.asarray(self._tree.data)
        margin = self.width + 5.0
        gx0 = pts[:, 0].min() - margin
        gy0 = pts[:, 1].min() - margin
        gnx = int(math.ceil((pts[:, 0].max() + margin - gx0) / h)) + 1
        gny = int(math.ceil((pts[:, 1].max() + margin - gy0) / h)) + 1
        cx = gx0 + h * (np.arange(gnx) + 0.5)
        cy = gy0 + h * (np.arange(gny) + 0.5)
        centers = np.stack(np.meshgrid(cx, cy, indexing="ij"), axis=-1)
        _, k = self._tree.query(centers.reshape(-1, 2))
        self._grid = (np.ascontiguousarray(k.astype(np.int64)),
                      gx0, gy0, 1.0 / h, gnx, gny,
                      np.ascontiguousarray(pts))

    def frenet_flat(self, px: np.ndarray, py: np.ndarray):
        """Kernel path of frenet_batch for flat contiguous coordinate
        arrays; returns flat (s, d, dist)."""
        self._ensure_grid()
        grid_k, gx0, gy0, inv_h, gnx, gny, pts = self._grid
        return frenet_lookup_invert(
            px, py, grid_k, gx0, gy0, inv_h, gnx, gny, pts,
            self.xy, self._seg, self._seg_len, self._normals, self.s,
            self.length, self.closed, self._n_pts)

    def frenet_batch(self, pts: np.ndarray):
        """(s, d, |dist|) for an (..., 2) array of Cartesian points.

        Nearest centerline sample via KD-tree, then the ruled chart is
        inverted on the two adjacent cells; the one containing the point
        wins. Does not raise for out-of-corridor points; the caller checks
        the returned distance.
        """
        pts = np.asarray(pts, dtype=float)
        if HAVE_NUMBA:
            shape = pts.shape[:-1]
            flat = pts.reshape(-1, 2)
            s, d, dist = self.frenet_flat(np.ascontiguousarray(flat[:, 0]),
                                          np.ascontiguousarray(flat[:, 1]))
            return s.reshape(shape), d.reshape(shape), dist.reshape(shape)
        _, k = self._tree.query(pts)
        n = self._n_pts
        k_prev = (k - 1) % n if self.closed else np.maximum(k - 1, 0)
        last_seg = n - 1 if self.closed else n - 2
        k_here = np.minimum(k, last_seg)
        s1, d1, u1, r1 = self._invert_cell(pts, k_prev)
        s2, d2, u2, r2 = self._invert_cell(pts, k_here)
        # prefer the cell whose solution lies inside it; fall back to the
        # smaller clamping residual at open-track ends
        in2 = (u2 >= 0.0) & (u2 <= 1.0)
        in1 = (u1 >= 0.0) & (u1 <= 1.0)
        use2 = np.where(in1 != in2, in2, r2 <= r1)
        s = np.where(use2, s2, s1)
        d = np.where(use2, d2, d1)
        resid = np.where(use2, r2, r1)
        dist = np.hypot(d, resid)
        return self.wrap_s(s), d, dist

    def cart_to_frenet(self, x: float, y: float) -> FrenetState:
        s, d, dist = self.frenet_batch(np.array([x, y]))
        if dist > self.width:
            raise OutOfCorridorError(f"({x:.2f}, {y:.2f}) is {dist:.2f} m off centerline")
        return FrenetState(float(s), float(d))

    def _interp(self, arr, s):
        s = self.wrap_s(np.asarray(s, dtype=float))
        return np.interp(s, self.s, arr)

    def frenet_to_cart(self, s: float, d: float = 0.0):
        """(x, y, psi_road) of the Frenet point (s, d).

        Evaluates the same ruled chart that cart_to_frenet inverts, so the
        pair is an exact inverse; the returned heading is the smooth
        interpolated one.
        """
        kappa = float(self._interp(self.curvature, s))
        if kappa != 0.0 and abs(d) >= 1.0 / abs(kappa):
            raise FoldOverError(f"|d|={abs(d):.2f} exceeds local radius {1/abs(kappa):.2f}")
        sw = float(self.wrap_s(s))
        i = int(np.clip(np.searchsorted(self.s, sw, side="right") - 1,
                        0, len(self._seg) - 1))
        u = (sw - self.s[i]) / self._seg_len[i]
        n = (1.0 - u) * self._normals[i] + u * self._normals[i + 1]
        x = self.xy[i, 0] + u * self._seg[i, 0] + d * n[0]
        y = self.xy[i, 1] + u * self._seg[i, 1] + d * n[1]
        psi = float(self._interp(self.heading, s))
        return x, y, psi

    def road_heading(self, s):
        """Linearly interpolated unwrapped road heading at arc length s."""
        return self._interp(self.heading, s)

    def road_curvature(self, s):
        return self._interp(self.curvature, s)

    def on_road(self, x: float, y: float, psi: float,
                circles: FootprintCircles):
        """(ok, margin): Frenet interval test for every footprint circle."""
        off = np.asarray(circles.offsets, dtype=float)
        centers = np.column_stack([x + off * math.cos(psi), y + off * math.sin(psi)])
        _, d, dist = self.frenet_batch(centers)
        if np.any(dist > self.width):
            return False, -math.inf
        margins = self.width / 2 - circles.radius - np.abs(d)
        margin = float(margins.min())
        return margin >= 0.0, margin

    def on_road_batch(self, x, y, psi, circles: FootprintCircles):
        """Vectorized footprint check; returns (ok, margin) arrays for
        broadcastable pose arrays."""
        x = np.asarray(x, dtype=float)
        off = np.asarray(circles.offsets, dtype=float)
        cx = x[..., None] + off * np.cos(psi)[..., None]
        cy = np.asarray(y)[..., None] + off * np.sin(psi)[..., None]
        pts = np.stack([cx, cy], axis=-1)
        _, d, dist = self.frenet_batch(pts)
        margins = np.where(dist > self.width, -np.inf,
                           self.width / 2 - circles.radius - np.abs(d))
        margin = margins.min(axis=-1)
        return margin >= 0.0, margin


def mixed_circuit(width: float = 10.0) -> Track:
    """The repo's closed test track: two straights with a right-left chicane,
    joined at each end by a pair of tight 15 m quarter-turns around a short
    connecting straight. Closure is exact by construction."""
    theta = math.radians(40.0)
    r_chic = 25.0
    chicane = [("arc", r_chic, theta), ("arc", r_chic, -theta),
               ("arc", r_chic, -theta), ("arc", r_chic, theta)]
    advance = 4 * r_chic * math.sin(theta)
    back = 40.0 + advance + 40.0
    cap = [("arc", 15.0, math.pi / 2), ("straight", 25.0),
           ("arc", 15.0, math.pi / 2)]
    segments = (
        [("straight", 40.0)] + chicane + [("straight", 40.0)]
        + cap + [("straight", back)] + cap
    )
    return Track.from_segments(segments, width=width, closed=True)


def save_track(track: Track, path: str | Path) -> None:
    xy = track.xy[:-1] if track.closed else track.xy
    doc = {
        "width": track.width,
        "closed": track.closed,
        "centerline": [[float(x), float(y)] for x, y in xy],
    }
    with open(path, "w") as f:
        json.dump(doc, f)
        f.write("\n")


def load_track(path: str | Path) -> Track:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        rows = path.read_text().strip().splitlines()
        if rows[0].strip().lower().replace(" ", "") != "x,y":
            raise ValueError("track CSV must carry an 'x,y' header")
        xy = np.array([[float(v) for v in r.split(",")] for r in rows[1:]])
        return Track(xy, width=10.0, closed=False)
    with open(path) as f:
        doc = json.load(f)
    return Track(np.array(doc["centerline"], dtype=float),
                 width=doc["width"], closed=doc["closed"])
