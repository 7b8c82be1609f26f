"""Hybrid-A* task-and-motion planner.

Nodes live on a 6-dimensional grid over (s, d, psi, v, beta, psidot) plus a
time-layer index; expansion interleaves two primitive families gated by the
mode-feasibility map: steady-state drift transitions sampled on the
equilibrium manifold, and constant-input rollouts of the semi-linearized
bicycle model. Cost is negated road progress, so the A* minimization
maximizes distance travelled within the fixed time horizon.
"""

from __future__ import annotations

import heapq
import math
import time
from dataclasses import dataclass, field

import numpy as np

from ._kernels import HAVE_NUMBA, lin_rollout, warmup
from .dynamics import bicycle_derivatives, integrate_primitive
from .esm import ESManifold, SamplePattern
from .params import V_EPS, BicycleParams, InputRanges, VehicleParams
from .track import FootprintCircles, Track

LIN = "LIN"
ESM = "ESM"

TWO_PI = 2.0 * math.pi

# trajectory row layout shared with sim/cli
PRIM_COLS = ("x", "y", "s", "d", "psi", "v", "beta", "psidot")


class PlanningError(RuntimeError):
    """Search cannot start or reconstruct (off-road init, no feasible mode)."""


@dataclass(frozen=True)
class FullState:
    t: float
    x: float
    y: float
    s: float
    d: float
    psi: float
    v: float
    beta: float
    psidot: float
    mode: str = LIN


@dataclass(frozen=True)
class GridSpec:
    """Equidistant discretization steps of the six gridded state variables."""

    ds: float = 2.0
    dd: float = 0.5
    dpsi: float = 0.1
    dv: float = 0.5
    dbeta: float = 0.05
    dpsidot: float = 0.1

    @property
    def steps(self):
        return (self.ds, self.dd, self.dpsi, self.dv, self.dbeta, self.dpsidot)

    def quantize(self, values):
        """(indices, remainders) with value = index*step + remainder,
        remainder in [0, step)."""
        idx, rem = [], []
        for val, step in zip(values, self.steps):
            i = int(math.floor(val / step))
            r = val - i * step
            if r < 0.0:
                i -= 1
                r = val - i * step
            if r >= step:
                i += 1
                r = val - i * step
            idx.append(i)
            rem.append(r)
        return tuple(idx), tuple(rem)

    def reconstruct(self, idx, rem):
        return tuple(i * step + r for i, r, step in zip(idx, rem, self.steps))

    def quantize_batch(self, values: np.ndarray):
        """Vectorized quantize of an (n, 6) array; same corrections as the
        scalar path."""
        steps = np.array(self.steps)
        idx = np.floor(values / steps).astype(np.int64)
        rem = values - idx * steps
        low = rem < 0.0
        idx[low] -= 1
        high = rem >= steps
        idx[high] += 1
        rem = values - idx * steps
        return idx, rem


@dataclass
class PlannerConfig:
    k_hor: int = 8
    ts: float = 0.5
    dt: float = 0.05
    n_timeout: int = 3500          # explored-node budget (the reported one)
    open_cap: int = 35000          # hard cap on the OPEN list size
    grid: GridSpec = field(default_factory=GridSpec)
    pattern: SamplePattern = field(default_factory=SamplePattern)
    w_smooth: float = 0.1
    w_edge: float = 0.5
    w_sibling: float = 0.05
    w_curve: float = 1.0           # overspeed-into-curvature penalty
    w_beta: float = 25.0           # side-slip penalty on straight sections
    w_drift: float = 12.0          # side-slip reward while rotating fast (capped)
    w_crab: float = 40.0           # penalty on slip not backed by yaw rate
    crab_cap: float = 0.15         # hard bound on that excess slip [rad]
    course_cap: float = 0.6        # bound on velocity-vector/road misalignment [rad]
    psidot_drift: float = 0.3      # yaw rate where the drift reward ramps in
    beta_cap: float = 0.45         # slip angle where the drift reward peaks
    kappa_gate: float = 0.04       # curvature at which the beta penalty bottoms out
    gate_floor: float = 0.0        # fraction of w_beta kept inside curves
    gate_lookahead: float = 25.0   # beta penalty fades this far before a curve
    brake_frac: float = 0.5        # usable decel fraction in the reference profile
    entry_offset: float = 20.0     # corner speed must be reached this early [m]
    viable_margin: float = 0.5     # speed slack over the profile at plan ends
    beta_viable: float = 0.35      # terminal |beta| allowance on straights
    beta_viable_curve: float = 0.9 # terminal |beta| allowance inside curves
    allow_lookahead: float = 20.0  # the curve allowance opens this early [m]
    h_discount: float = 0.5        # depth bias; 1.0 restores the admissible core
    v_max: float = 30.0
    a_max: float = 5.886
    n_delta: int = 5
    n_lambda: int = 5
    ranges: InputRanges = field(default_factory=InputRanges)
    beta_bound: float = 1.0
    psidot_bound: float = 1.5
    allow_reopen: bool = False

    @property
    def t_hor(self) -> float:
        return self.k_hor * self.ts

    def __post_init__(self):
        if self.k_hor < 1:
            raise ValueError("horizon must be at least one step")
        if self.ts <= 0 or self.dt <= 0 or self.ts < self.dt:
            raise ValueError("need 0 < dt <= ts")


@dataclass
class PlanStats:
    nodes_expanded: int
    wall_ms: float
    deepest_k: int
    terminated_by: str


@dataclass
class PlanResult:
    states: list          # FullState sequence at dt resolution
    stats: PlanStats

    @property
    def progress(self) -> float:
        return -self._best_g

    _best_g: float = 0.0


@dataclass
class Node:
    """Hybrid-A* node: 6 grid indices, 6 parent indices, 6 remainders,
    g and f — plus layer/mode/primitive bookkeeping."""

    idx: tuple
    parent_idx: tuple
    rem: tuple
    g: float
    f: float
    k: int
    mode: str
    prim: np.ndarray      # (n, 8) rows in PRIM_COLS order, parent state first
    pen: float = 0.0      # accumulated augmentation penalty along the path


def mode_feasibility(beta, psidot, manifold: ESManifold, bike: BicycleParams,
                     lin_only: bool = False) -> frozenset:
    modes = set()
    if abs(beta) < bike.beta_lin and abs(psidot) < bike.psidot_lin:
        modes.add(LIN)
    if not lin_only and manifold.contains(beta, psidot):
        modes.add(ESM)
    return frozenset(modes)


def step_cost(prim: np.ndarray, track: Track) -> float:
    """Negated Frenet progress of one primitive (wrapped on closed tracks)."""
    ds = prim[-1, 2] - prim[0, 2]
    if track.closed:
        ds = (ds + track.length / 2.0) % track.length - track.length / 2.0
    return -ds


class Planner:
    def __init__(self, track: Track, manifold: ESManifold,
                 vehicle: VehicleParams, bike: BicycleParams,
                 config: PlannerConfig = None,
                 circles: FootprintCircles = None,
                 lin_only: bool = False):
        self.track = track
        self.manifold = manifold
        self.vehicle = vehicle
        self.bike = bike
        self.config = config or PlannerConfig()
        self.circles = circles or FootprintCircles()
        self.lin_only = lin_only

        # progress can outrun the odometer on the inside of a curve by
        # 1/(1 - d*kappa); fold the worst case into the heuristic so the
        # core term stays an upper bound on achievable progress
        kappa_max = float(np.abs(track.curvature).max())
        d_max = track.width / 2.0
        if 0.0 in self.circles.offsets:
            d_max -= self.circles.radius
        self._gamma = 1.0 / max(1.0 - d_max * kappa_max, 0.05)

        cfg = self.config
        self._deltas = np.repeat(
            np.linspace(cfg.ranges.delta_min, cfg.ranges.delta_max, cfg.n_delta),
            cfg.n_lambda)
        self._lams = np.tile(
            np.linspace(cfg.ranges.lambda_min, cfg.ranges.lambda_max, cfg.n_lambda),
            cfg.n_delta)

        # curvature-limited reference speed along the centerline (lateral
        # grip limit plus a backward braking pass); the w_curve augmentation
        # penalizes carrying more speed than this into upcoming curves
        kappa = np.abs(track.curvature)
        v_curve = np.sqrt(cfg.a_max / np.maximum(kappa, cfg.a_max / cfg.v_max ** 2))
        if lin_only:
            # without the drift primitives every curve has to be taken inside
            # the linear-model validity box: steady cornering at curvature
            # kappa needs rear slip ~ m*lf*v^2*kappa / (Cr*L), so the slip
            # bound turns into a speed limit (the yaw-rate bound rarely binds)
            kc = np.maximum(kappa, 1e-6)
            v_slip = np.sqrt((bike.beta_lin + vehicle.lr * kc)
                             * bike.Cr * vehicle.wheelbase
                             / (vehicle.m * vehicle.lf * kc))
            v_yaw = bike.psidot_lin / kc
            v_curve = np.minimum(v_curve, 0.85 * np.minimum(v_slip, v_yaw))
        # corner speed is demanded entry_offset metres early: transitioning
        # into a drift happens at corner speed, not during the braking zone
        prof = np.array([
            v_curve[(track.s >= sm) & (track.s <= sm + cfg.entry_offset)].min()
            if not track.closed else
            v_curve[(np.mod(track.s - sm, track.length) <= cfg.entry_offset)].min()
            for sm in track.s])
        a_brake = cfg.brake_frac * cfg.a_max
        if lin_only:
            # braking authority of the linear model is longitudinal-stiffness
            # limited, far below the friction circle the drift primitives use
            a_brake = min(a_brake,
                          0.8 * bike.Cx * abs(cfg.ranges.lambda_min) / vehicle.m)
        n_pass = 2 if track.closed else 1
        for _ in range(n_pass):
            for m in range(len(prof) - 2, -1, -1):
                ds = track.s[m + 1] - track.s[m]
                prof[m] = min(prof[m], math.sqrt(prof[m + 1] ** 2 + 2 * a_brake * ds))
            if track.closed:
                prof[-1] = min(prof[-1], prof[0])
        self._v_profile = prof

        # side-slip is taxed only where the road ahead is straight: the gate
        # is the windowed forward maximum of |kappa|, so the penalty already
        # fades during corner-entry preparation
        k_ahead = np.abs(track.curvature)
        if track.closed:
            k_ext = np.concatenate([k_ahead, k_ahead])
            s_ext = np.concatenate([track.s, track.s + track.length])
        else:
            k_ext, s_ext = k_ahead, track.s
        w_max = np.empty_like(k_ahead)
        hi = 0
        for m in range(len(k_ahead)):
            hi = max(hi, m)
            while hi + 1 < len(s_ext) and s_ext[hi + 1] <= track.s[m] + cfg.gate_lookahead:
                hi += 1
            w_max[m] = k_ext[m:hi + 1].max()
        open_gate = np.clip(1.0 - w_max / cfg.kappa_gate, 0.0, 1.0)
        self._beta_gate = cfg.gate_floor + (1.0 - cfg.gate_floor) * open_gate
        # drift reward region: genuinely tight corners (15 m-radius scale),
        # keyed to the local curvature so the reward shuts off between
        # back-to-back corners
        self._curve_frac = np.clip(
            (k_ahead - cfg.kappa_gate) / (1.0 / 15.0 - cfg.kappa_gate), 0.0, 1.0)
        # deep side-slip is only allowed where the road is locally tight:
        # a drift can unwind inside a corner (high yaw rate, low equilibrium
        # speeds) but not on a straight, where the manifold's equilibrium
        # speeds jump far above the Eq-15 per-step velocity cap; a short
        # forward window lets the drift build up just before corner entry
        frac_ext = np.concatenate([self._curve_frac, self._curve_frac]) \
            if track.closed else self._curve_frac
        frac_w = np.empty_like(self._curve_frac)
        hi = 0
        for m in range(len(frac_w)):
            hi = max(hi, m)
            while hi + 1 < len(s_ext) \
                    and s_ext[hi + 1] <= track.s[m] + cfg.allow_lookahead:
                hi += 1
            frac_w[m] = frac_ext[m:hi + 1].max()
        self._beta_allow = (cfg.beta_viable + (cfg.beta_viable_curve
                                               - cfg.beta_viable) * frac_w)

        offsets = np.asarray(self.circles.offsets, dtype=float)
        zero = np.flatnonzero(offsets == 0.0)
        if zero.size:
            self._off, self._cog_col = offsets, int(zero[0])
        else:
            self._off, self._cog_col = np.append(offsets, 0.0), len(offsets)

        warmup(track, vehicle, bike)

    # -- heuristic ------------------------------------------------------------

    def h_core(self, v: float, k: int) -> float:
        """Admissible cost-to-go: full-throttle to v_max, then cruise, scaled
        by the worst-case inside-line progress gain."""
        cfg = self.config
        tau = (cfg.k_hor - k) * cfg.ts
        if tau <= 0.0:
            return 0.0
        v = min(max(v, 0.0), cfg.v_max)
        t_acc = min(tau, (cfg.v_max - v) / cfg.a_max)
        dist = v * t_acc + 0.5 * cfg.a_max * t_acc ** 2 + cfg.v_max * (tau - t_acc)
        return -self._gamma * dist

    def _step_penalty(self, v, s, d, beta, psidot, rate_pen, sibling_pen):
        """Shaping terms accumulated along the path (kept out of g so the
        progress accounting stays pure)."""
        cfg = self.config
        sw = self.track.wrap_s(s)
        edge = (2.0 * abs(d) / self.track.width) ** 2
        v_ref = float(np.interp(sw, self.track.s, self._v_profile))
        curve = max(0.0, v - v_ref) ** 2
        gate = float(np.interp(sw, self.track.s, self._beta_gate))
        # fast rotation in tight corners is rewarded when done with slip;
        # crabbing (high slip at near-zero yaw rate) earns nothing, and
        # neither does sliding through gentle curves
        rot = min(max(abs(psidot) / cfg.psidot_drift - 1.0, 0.0), 1.0)
        tight = float(np.interp(sw, self.track.s, self._curve_frac))
        # peaks at beta_cap and falls off beyond: over-rotating a drift is
        # as undesirable as not drifting at all
        drift = rot * tight * (min(beta ** 2, cfg.beta_cap ** 2)
                               - 3.0 * max(abs(beta) - cfg.beta_cap, 0.0) ** 2)
        # slip has to be earned by yaw rate: a counter-steered drift turns
        # the car, while crabbing sideways down the road leads to states the
        # manifold cannot unwind within the per-step jump bounds
        crab = max(abs(beta) - abs(psidot) - self.bike.beta_lin, 0.0)
        return (cfg.w_smooth * rate_pen + cfg.w_edge * edge
                + cfg.w_sibling * sibling_pen + cfg.w_curve * curve
                + cfg.w_beta * gate * beta ** 2 + cfg.w_crab * crab ** 2
                - cfg.w_drift * drift)

    def viable(self, node: Node) -> bool:
        """A plan may only end in a state the next plan can continue from:
        under the braking envelope, and without deep side-slip where the
        road ahead is straight (shedding speed out of a drift is slow)."""
        row = node.prim[-1]
        sw = self.track.wrap_s(row[2])
        v_ref = float(np.interp(sw, self.track.s, self._v_profile))
        if row[5] > v_ref + self.config.viable_margin:
            return False
        allow = float(np.interp(sw, self.track.s, self._beta_allow))
        if abs(row[6]) > allow:
            return False
        crab = abs(row[6]) - abs(row[7]) - self.bike.beta_lin
        if crab > self.config.crab_cap:
            return False
        course = abs(float(np.remainder(
            row[4] + row[6] - self.track.road_heading(sw) + math.pi,
            TWO_PI)) - math.pi)
        return course <= self.config.course_cap

    # -- expansion ------------------------------------------------------------

    def mode_feasibility(self, beta, psidot) -> frozenset:
        return mode_feasibility(beta, psidot, self.manifold, self.bike,
                                self.lin_only)

    def continuous(self, node: Node):
        return self.config.grid.reconstruct(node.idx, node.rem)

    def expand(self, node: Node, closed: set = None):
        """(children, collided_keys) one layer deeper.

        All primitives of both modes are rolled out in one vectorized batch;
        interior poses are collision-checked at dt resolution.
        """
        cfg = self.config
        s0, d0, psi0, v0, b0, p0 = self.continuous(node)
        x0, y0, _ = self.track.frenet_to_cart(s0, d0)
        steps = int(round(cfg.ts / cfg.dt))
        pat = cfg.pattern

        modes = self.mode_feasibility(b0, p0)

        blocks_v, blocks_b, blocks_p = [], [], []
        n_esm = 0
        ramp = np.arange(steps + 1) / steps

        if ESM in modes:
            center = self.manifold.project(b0, p0)
            vn, bn, pn, _, _ = self.manifold.neighborhood_arrays(center, pat)
            vc = np.concatenate([[center.v], vn])
            bc = np.concatenate([[center.beta], bn])
            pc = np.concatenate([[center.psidot], pn])
            okc = ((np.abs(vc - v0) <= pat.dv_max)
                   & (np.abs(bc - b0) <= pat.dbeta_max)
                   & (np.abs(pc - p0) <= pat.dpsidot_max))
            vc, bc, pc = vc[okc], bc[okc], pc[okc]
            n_esm = len(vc)
            if n_esm:
                blocks_v.append(v0 + ramp * (vc[:, None] - v0))
                blocks_b.append(b0 + ramp * (bc[:, None] - b0))
                blocks_p.append(p0 + ramp * (pc[:, None] - p0))

        if LIN in modes:
            if HAVE_NUMBA:
                vs, bs, ps = lin_rollout(
                    v0, b0, p0, self._deltas, self._lams, cfg.dt, steps,
                    self.vehicle.lf, self.vehicle.lr, self.vehicle.m,
                    self.vehicle.Jz, self.bike.Cf, self.bike.Cr,
                    self.bike.Cx, V_EPS)
            else:
                P = len(self._deltas)
                v = np.full(P, v0)
                b = np.full(P, b0)
                p = np.full(P, p0)
                vs = np.empty((P, steps + 1))
                bs = np.empty((P, steps + 1))
                ps = np.empty((P, steps + 1))
                vs[:, 0], bs[:, 0], ps[:, 0] = v, b, p
                for i in range(steps):
                    dv, db, dp = bicycle_derivatives(
                        v, b, p, self._deltas, self._lams,
                        self.vehicle, self.bike, check=False)
                    v = np.maximum(v + dv * cfg.dt, V_EPS)
                    b = b + db * cfg.dt
                    p = p + dp * cfg.dt
                    vs[:, i + 1], bs[:, i + 1], ps[:, i + 1] = v, b, p
            keep = ((np.abs(vs[:, -1] - v0) <= pat.dv_max)
                    & (np.abs(bs[:, -1] - b0) <= pat.dbeta_max)
                    & (np.abs(ps[:, -1] - p0) <= pat.dpsidot_max)
                    & (vs[:, -1] <= cfg.v_max)
                    & (np.abs(bs[:, -1]) <= cfg.beta_bound)
                    & (np.abs(ps[:, -1]) <= cfg.psidot_bound))
            if keep.any():
                blocks_v.append(vs[keep])
                blocks_b.append(bs[keep])
                blocks_p.append(ps[keep])

        if not blocks_v:
            return [], []

        V = np.concatenate(blocks_v)
        B = np.concatenate(blocks_b)
        PD = np.concatenate(blocks_p)
        prim_modes = [ESM] * n_esm + [LIN] * (len(V) - n_esm)
        x, y, psi = integrate_primitive(
            x0, y0, psi0, V[:, :-1], B[:, :-1], PD[:, :-1], cfg.dt)

        n_prims = len(V)
        v_end, b_end, p_end = V[:, -1], B[:, -1], PD[:, -1]

        # stage 1: one cheap Frenet query of the endpoint COGs fixes each
        # primitive's grid cell, envelope status, and every augmentation
        # term (all are endpoint quantities); primitives landing in an
        # already-closed cell can then be dropped before the dense interior
        # collision check — their fate in the search loop is identical
        # either way, and nothing below depends on their collision status
        sw, d_e, _ = self.track.frenet_batch(
            np.stack([x[:, -1], y[:, -1]], axis=-1))
        ends = np.column_stack([sw, d_e, psi[:, -1] % TWO_PI,
                                v_end, b_end, p_end])
        idx_all, rem_all = cfg.grid.quantize_batch(ends)
        idx_list = idx_all.tolist()
        rem_list = rem_all.tolist()
        k1 = node.k + 1

        # per-step envelope: children may exceed the braking profile or the
        # local side-slip allowance only while actively shedding it, so a
        # plan can never postpone recovery past its own horizon
        s0w = self.track.wrap_s(s0)
        v_ref = np.interp(sw, self.track.s, self._v_profile)
        allow = np.interp(sw, self.track.s, self._beta_allow)
        under_prof = v_end <= v_ref + cfg.viable_margin
        under_beta = np.abs(b_end) <= allow
        crab = np.maximum(np.abs(b_end) - np.abs(p_end) - self.bike.beta_lin,
                          0.0)
        crab0 = max(abs(b0) - abs(p0) - self.bike.beta_lin, 0.0)
        # course alignment: the velocity vector may point only so far off
        # the road direction — badly misaligned states drain the lateral
        # corridor faster than any recovery can catch up
        course = np.abs(np.remainder(
            psi[:, -1] + b_end - self.track.road_heading(sw) + math.pi,
            TWO_PI) - math.pi)
        course0 = abs(float(np.remainder(
            psi0 + b0 - self.track.road_heading(s0w) + math.pi,
            TWO_PI)) - math.pi)
        ok_env = (under_prof | (v_end <= v0 - 0.25)) \
            & (under_beta | (np.abs(b_end) <= abs(b0) - 0.02)) \
            & ((crab <= cfg.crab_cap) | (crab <= crab0 - 0.02)) \
            & ((course <= cfg.course_cap) | (course <= course0 - 0.05))
        viab = under_prof & under_beta & (crab <= cfg.crab_cap) \
            & (course <= cfg.course_cap)

        # augmentation terms, vectorized over the batch; the sibling share
        # counts envelope drops so it is independent of collision outcomes
        edge = (2.0 * np.abs(d_e) / self.track.width) ** 2
        curve = np.maximum(0.0, v_end - v_ref) ** 2
        gate = np.interp(sw, self.track.s, self._beta_gate)
        rot = np.clip(np.abs(p_end) / cfg.psidot_drift - 1.0, 0.0, 1.0)
        tight = np.interp(sw, self.track.s, self._curve_frac)
        drift = rot * tight * (np.minimum(b_end ** 2, cfg.beta_cap ** 2)
                               - 3.0 * np.maximum(np.abs(b_end) - cfg.beta_cap,
                                                  0.0) ** 2)
        rate_pen = (np.abs(v_end - v0) / pat.dv_max
                    + np.abs(b_end - b0) / pat.dbeta_max
                    + np.abs(p_end - p0) / pat.dpsidot_max)
        sib = float(n_prims - np.count_nonzero(ok_env)) / n_prims
        pen_step = (cfg.w_smooth * rate_pen + cfg.w_edge * edge
                    + cfg.w_curve * curve + cfg.w_beta * gate * b_end ** 2
                    + cfg.w_crab * crab ** 2 - cfg.w_drift * drift
                    + cfg.w_sibling * sib)
        ds_step = (sw - s0w + self.track.length / 2.0) \
            % self.track.length - self.track.length / 2.0 \
            if self.track.closed else sw - s0w

        # only primitives whose cell is already closed may skip the dense
        # check: their collision entry would be a no-op and their child
        # would be discarded, so no side effect is lost
        if closed is not None:
            sub = np.flatnonzero(np.array(
                [(tuple(idx_list[i]), k1) not in closed
                 for i in range(n_prims)]))
        else:
            sub = np.arange(n_prims)
        if sub.size == 0:
            return [], []

        # stage 2: every interior pose of the remaining primitives is
        # collision-checked at dt resolution through the footprint circles
        # (the COG reuses the zero-offset circle column)
        off, cog_col = self._off, self._cog_col
        xs, ys, ps_ = x[sub, 1:], y[sub, 1:], psi[sub, 1:]
        cx = xs[..., None] + off * np.cos(ps_)[..., None]
        cy = ys[..., None] + off * np.sin(ps_)[..., None]
        s_all, d_all, dist_all = self.track.frenet_batch(
            np.stack([cx, cy], axis=-1))
        n_circ = len(self.circles.offsets)
        margins = np.where(dist_all[..., :n_circ] > self.track.width, -np.inf,
                           self.track.width / 2 - self.circles.radius
                           - np.abs(d_all[..., :n_circ]))
        ok_prim = (margins.min(axis=-1) >= 0.0).all(axis=1)
        s_rows = np.empty((sub.size, steps + 1))
        d_rows = np.empty((sub.size, steps + 1))
        s_rows[:, 1:] = s_all[..., cog_col]
        d_rows[:, 1:] = d_all[..., cog_col]
        s_rows[:, 0] = s0w
        d_rows[:, 0] = d0

        children, collided = [], []
        for j, i in enumerate(sub):
            if not ok_prim[j]:
                collided.append((tuple(idx_list[i]), k1))
                continue
            if not ok_env[i]:
                continue      # out of envelope and not recovering: drop only
            prim = np.stack([x[i], y[i], s_rows[j], d_rows[j], psi[i],
                             V[i], B[i], PD[i]], axis=-1)
            child = Node(idx=tuple(idx_list[i]), parent_idx=node.idx,
                         rem=tuple(rem_list[i]), g=node.g - ds_step[i],
                         f=0.0, k=k1, mode=prim_modes[i], prim=prim)
            child.pen = node.pen + pen_step[i]
            child._viable = bool(viab[i])
            child.f = child.g + child.pen \
                + cfg.h_discount * self.h_core(v_end[i], k1)
            children.append(child)
        return children, collided

    # -- search ---------------------------------------------------------------

    def search(self, init: FullState) -> PlanResult:
        cfg = self.config
        t_start = time.perf_counter()

        ok, _ = self.track.on_road(init.x, init.y, init.psi, self.circles)
        if not ok:
            raise PlanningError(f"initial pose off road at s={init.s:.1f}")
        if not self.mode_feasibility(init.beta, init.psidot):
            raise PlanningError("no feasible expansion mode at initial state")

        start_vals = (float(self.track.wrap_s(init.s)), init.d,
                      init.psi % TWO_PI, init.v, init.beta, init.psidot)
        idx0, rem0 = cfg.grid.quantize(start_vals)
        root_prim = np.array([[init.x, init.y, start_vals[0], init.d,
                               init.psi, init.v, init.beta, init.psidot]])
        root = Node(idx=idx0, parent_idx=None, rem=rem0, g=0.0,
                    f=self.h_core(init.v, 0), k=0, mode="", prim=root_prim)
        root._viable = self.viable(root)

        nodes = {(idx0, 0): root}
        open_seq = {(idx0, 0): 0}
        heap = [(root.f, root.g, 0, (idx0, 0))]
        closed = set()
        seq = 0
        expanded = 0
        best_key = (idx0, 0)
        best_viable_key = None
        terminated = "exhausted"

        def better(a: Node, b: Node) -> bool:
            return a.k > b.k or (a.k == b.k and a.g + a.pen < b.g + b.pen)

        while heap:
            f, g, sq, key = heapq.heappop(heap)
            if open_seq.get(key) != sq:
                continue                      # stale entry
            del open_seq[key]
            node = nodes[key]
            if node.k >= cfg.k_hor:
                if node._viable:
                    best_key = key
                    terminated = "horizon"
                    break
                continue          # dead-end endpoint; keep searching
            if expanded >= cfg.n_timeout:
                terminated = "budget"
                break
            closed.add(key)
            children, collided = self.expand(node, closed)
            expanded += 1
            for ckey in collided:
                closed.add(ckey)
            for child in children:
                ckey = (child.idx, child.k)
                if ckey in closed and not cfg.allow_reopen:
                    continue
                incumbent = nodes.get(ckey)
                if incumbent is not None and ckey not in open_seq \
                        and not cfg.allow_reopen:
                    continue                  # closed via another route
                if incumbent is None or child.g + child.pen < incumbent.g + incumbent.pen:
                    nodes[ckey] = child
                    seq += 1
                    open_seq[ckey] = seq
                    heapq.heappush(heap, (child.f, child.g, seq, ckey))
                    closed.discard(ckey)
                    if better(child, nodes[best_key]):
                        best_key = ckey
                    if child._viable:
                        if best_viable_key is None \
                                or better(child, nodes[best_viable_key]):
                            best_viable_key = ckey
                    elif ckey == best_viable_key:
                        best_viable_key = None
            if len(open_seq) > cfg.open_cap:
                terminated = "open_cap"
                break

        if terminated != "horizon" and best_viable_key is not None:
            best_key = best_viable_key
        best = nodes[best_key]
        wall_ms = (time.perf_counter() - t_start) * 1e3
        states = self.get_traj(best, nodes, t0=init.t)
        stats = PlanStats(nodes_expanded=expanded, wall_ms=wall_ms,
                          deepest_k=best.k, terminated_by=terminated)
        result = PlanResult(states=states, stats=stats)
        result._best_g = best.g
        return result

    def get_traj(self, node: Node, nodes: dict, t0: float = 0.0) -> list:
        """Concatenate stored primitives along the parent chain.

        Frenet coordinates skipped by the strided collision check are
        recomputed here in one batch — only the chosen plan pays for the
        full-resolution conversion."""
        chain = []
        cur = node
        while cur.k > 0:
            chain.append(cur)
            pkey = (cur.parent_idx, cur.k - 1)
            if pkey not in nodes:
                raise PlanningError("broken parent chain during reconstruction")
            cur = nodes[pkey]
        chain.append(cur)
        chain.reverse()

        cfg = self.config
        rows = [chain[0].prim[0]] + [seg.prim[j] for seg in chain[1:]
                                     for j in range(1, len(seg.prim))]
        rows = np.array(rows)
        hole = np.isnan(rows[:, 2])
        if hole.any():
            s_f, d_f, _ = self.track.frenet_batch(rows[hole][:, :2])
            rows[hole, 2] = s_f
            rows[hole, 3] = d_f

        states = []
        first_mode = chain[1].mode if len(chain) > 1 else LIN
        modes = [first_mode] + [seg.mode for seg in chain[1:]
                                for _ in range(1, len(seg.prim))]
        for r, row in enumerate(rows):
            states.append(FullState(t0 + r * cfg.dt, *row[:2], *row[2:5],
                                    *row[5:8], mode=modes[r]))
        return states
