"""Numba-compiled inner loops.

The planner spends almost all of its time in two places: inverting the
track's ruled (s, d) chart for batches of query points, and rolling out
the constant-input bicycle primitives. Both are small scalar loops that
numba compiles well; the pure-numpy fallbacks in track.py / planner.py
compute exactly the same quantities and remain the reference
implementation.

Kernels are cached to disk (``cache=True``) and warmed up once at
planner construction, so JIT compilation never lands inside a timed
planning call.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:                                       # pragma: no cover
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn
        return wrap if not (args and callable(args[0])) else args[0]


@njit(cache=True)
def _invert_one(px, py, i, xy, seg, seg_len, normals, s_arr):
    """Scalar twin of Track._invert_cell for one point on one cell."""
    ax = xy[i, 0]
    ay = xy[i, 1]
    ex = seg[i, 0]
    ey = seg[i, 1]
    nx = normals[i, 0]
    ny = normals[i, 1]
    dnx = normals[i + 1, 0] - nx
    dny = normals[i + 1, 1] - ny
    qx = px - ax
    qy = py - ay
    A = -(ex * dny - ey * dnx)
    B = (qx * dny - qy * dnx) - (ex * ny - ey * nx)
    C = qx * ny - qy * nx
    u = -C / B
    for _ in range(2):
        u = u - (A * u * u + B * u + C) / (2.0 * A * u + B)
    uc = u
    if uc < 0.0:
        uc = 0.0
    elif uc > 1.0:
        uc = 1.0
    wx = nx + uc * dnx
    wy = ny + uc * dny
    rx = qx - uc * ex
    ry = qy - uc * ey
    d = (rx * wx + ry * wy) / (wx * wx + wy * wy)
    resid = np.hypot(rx - d * wx, ry - d * wy)
    s = s_arr[i] + uc * seg_len[i]
    return s, d, u, resid


@njit(cache=True)
def frenet_invert(px, py, k, xy, seg, seg_len, normals, s_arr,
                  length, closed, n_pts):
    """Two-cell ruled-chart inversion for flat point arrays.

    ``k`` holds the nearest centerline sample per point (KD-tree result);
    the chart is inverted on the cells on either side of it and the cell
    containing the point wins, falling back to the smaller clamping
    residual at open-track ends. Returns (s, d, dist) with s wrapped on
    closed tracks.
    """
    m_pts = px.size
    s_out = np.empty(m_pts)
    d_out = np.empty(m_pts)
    dist_out = np.empty(m_pts)
    last_seg = n_pts - 1 if closed else n_pts - 2
    for m in range(m_pts):
        ki = k[m]
        if closed:
            kp = (ki - 1) % n_pts
        else:
            kp = ki - 1 if ki > 0 else 0
        kh = ki if ki < last_seg else last_seg
        s1, d1, u1, r1 = _invert_one(px[m], py[m], kp,
                                     xy, seg, seg_len, normals, s_arr)
        s2, d2, u2, r2 = _invert_one(px[m], py[m], kh,
                                     xy, seg, seg_len, normals, s_arr)
        in1 = (u1 >= 0.0) and (u1 <= 1.0)
        in2 = (u2 >= 0.0) and (u2 <= 1.0)
        if in1 != in2:
            use2 = in2
        else:
            use2 = r2 <= r1
        if use2:
            s, d, resid = s2, d2, r2
        else:
            s, d, resid = s1, d1, r1
        if closed:
            s = s % length
        s_out[m] = s
        d_out[m] = d
        dist_out[m] = np.hypot(d, resid)
    return s_out, d_out, dist_out


@njit(cache=True)
def frenet_lookup_invert(px, py, grid_k, gx0, gy0, inv_h, gnx, gny,
                         pts, xy, seg, seg_len, normals, s_arr,
                         length, closed, n_pts):
    """Like frenet_invert, but finds the nearest centerline sample itself:
    a uniform spatial grid gives a starting sample per query point and a
    hill-climb along the (ordered) centerline refines it to the true
    nearest. Replaces the KD-tree query on the planner's hot path."""
    m_pts = px.size
    s_out = np.empty(m_pts)
    d_out = np.empty(m_pts)
    dist_out = np.empty(m_pts)
    last_seg = n_pts - 1 if closed else n_pts - 2
    for m in range(m_pts):
        x = px[m]
        y = py[m]
        ix = int((x - gx0) * inv_h)
        if ix < 0:
            ix = 0
        elif ix >= gnx:
            ix = gnx - 1
        iy = int((y - gy0) * inv_h)
        if iy < 0:
            iy = 0
        elif iy >= gny:
            iy = gny - 1
        k = grid_k[ix * gny + iy]
        dx = x - pts[k, 0]
        dy = y - pts[k, 1]
        best = dx * dx + dy * dy
        for _ in range(n_pts):
            moved = False
            kn = k + 1
            if kn >= n_pts:
                kn = 0 if closed else k
            if kn != k:
                dx = x - pts[kn, 0]
                dy = y - pts[kn, 1]
                d2 = dx * dx + dy * dy
                if d2 < best:
                    best = d2
                    k = kn
                    moved = True
            if not moved:
                kp = k - 1
                if kp < 0:
                    kp = n_pts - 1 if closed else k
                if kp != k:
                    dx = x - pts[kp, 0]
                    dy = y - pts[kp, 1]
                    d2 = dx * dx + dy * dy
                    if d2 < best:
                        best = d2
                        k = kp
                        moved = True
            if not moved:
                break
        if closed:
            kp = (k - 1) % n_pts
        else:
            kp = k - 1 if k > 0 else 0
        kh = k if k < last_seg else last_seg
        s1, d1, u1, r1 = _invert_one(x, y, kp, xy, seg, seg_len,
                                     normals, s_arr)
        s2, d2_, u2, r2 = _invert_one(x, y, kh, xy, seg, seg_len,
                                      normals, s_arr)
        in1 = (u1 >= 0.0) and (u1 <= 1.0)
        in2 = (u2 >= 0.0) and (u2 <= 1.0)
        if in1 != in2:
            use2 = in2
        else:
            use2 = r2 <= r1
        if use2:
            s, d, resid = s2, d2_, r2
        else:
            s, d, resid = s1, d1, r1
        if closed:
            s = s % length
        s_out[m] = s
        d_out[m] = d
        dist_out[m] = np.hypot(d, resid)
    return s_out, d_out, dist_out


@njit(cache=True)
def lin_rollout(v0, b0, p0, deltas, lams, dt, steps,
                lf, lr, mass, Jz, Cf, Cr, Cx, v_eps):
    """Explicit-Euler rollout of the semi-linear bicycle model for a batch
    of constant (delta, lambda) inputs; matches bicycle_derivatives with
    the validity check disabled."""
    P = deltas.size
    vs = np.empty((P, steps + 1))
    bs = np.empty((P, steps + 1))
    ps = np.empty((P, steps + 1))
    for i in range(P):
        v = v0
        b = b0
        p = p0
        vs[i, 0] = v
        bs[i, 0] = b
        ps[i, 0] = p
        Fxr = Cx * lams[i]
        for t in range(steps):
            veff = v if v > v_eps else v_eps
            Fyf = -Cf * (b + lf * p / veff - deltas[i])
            Fyr = -Cr * (b - lr * p / veff)
            vdot = p * veff * b + Fxr / mass
            bdot = (Fyf + Fyr) / (mass * veff) - p
            pdot = (lf * Fyf - lr * Fyr) / Jz
            v = v + vdot * dt
            if v < v_eps:
                v = v_eps
            b = b + bdot * dt
            p = p + pdot * dt
            vs[i, t + 1] = v
            bs[i, t + 1] = b
            ps[i, t + 1] = p
    return vs, bs, ps


def warmup(track, vehicle, bike):
    """Trigger (cached) JIT compilation of every kernel with tiny inputs."""
    if not HAVE_NUMBA:
        return
    pts = np.zeros(1)
    k = np.zeros(1, dtype=np.int64)
    frenet_invert(pts + track.xy[0, 0], pts + track.xy[0, 1], k,
                  track.xy, track._seg, track._seg_len, track._normals,
                  track.s, track.length, track.closed, track._n_pts)
    lin_rollout(5.0, 0.0, 0.0, np.zeros(1), np.zeros(1), 0.05, 1,
                vehicle.lf, vehicle.lr, vehicle.m, vehicle.Jz,
                bike.Cf, bike.Cr, bike.Cx, 0.5)
