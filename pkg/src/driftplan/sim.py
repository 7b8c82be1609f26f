"""Moving-horizon replanning loop under perfect actuation.

Every T_rep the planner is queried from the state the vehicle will occupy
T_plan in the future (the old plan covers the gap while the new one is
computed), and the executed trajectory is spliced together from the plans.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field

import numpy as np

from .planner import FullState, Planner, PlanningError


@dataclass
class SimConfig:
    t_rep: float = 0.5        # replanning interval [s]
    t_plan: float = 0.1       # guaranteed planning-time bound [s]
    beta_drift: float = 0.4   # |beta| above which a sample counts as drifting
    v0: float = 5.0           # start-line speed
    max_time: float = 300.0   # simulated-time safety stop

    def __post_init__(self):
        if not 0.0 < self.t_plan <= self.t_rep:
            raise ValueError("need 0 < t_plan <= t_rep")


@dataclass
class LapResult:
    completed: bool
    lap_time: float
    avg_speed: float
    states: list                      # executed FullState samples
    plan_stats: list                  # one PlanStats per replanning step
    drift_intervals: list             # ordered (t_start, t_end) pairs
    failure: str = ""


@dataclass
class StatsSummary:
    n_plans: int
    wall_ms_median: float
    wall_ms_mean: float
    wall_ms_max: float
    nodes_median: float
    nodes_max: int


def _wrap_ds(ds, length):
    return (ds + length / 2.0) % length - length / 2.0


def run_lap(planner: Planner, config: SimConfig = None) -> LapResult:
    cfg = config or SimConfig()
    track = planner.track
    if not track.closed:
        raise ValueError("lap simulation needs a closed track")
    dt = planner.config.dt
    n_exec = int(round(cfg.t_rep / dt))
    n_gap = int(round(cfg.t_plan / dt))
    if abs(n_exec * dt - cfg.t_rep) > 1e-9 or abs(n_gap * dt - cfg.t_plan) > 1e-9:
        raise ValueError("t_rep and t_plan must be multiples of the planner dt")

    x0, y0, psi0 = track.frenet_to_cart(0.0, 0.0)
    state = FullState(0.0, x0, y0, 0.0, 0.0, psi0, cfg.v0, 0.0, 0.0)

    executed = []
    plan_stats = []
    s_acc = 0.0
    s_prev = 0.0
    lap_time = math.nan

    def fail(msg):
        return LapResult(False, math.nan, math.nan, executed, plan_stats,
                         _drift_intervals(executed, cfg.beta_drift), failure=msg)

    try:
        plan = planner.search(state)
    except PlanningError as exc:
        return fail(f"initial plan failed: {exc}")
    plan_stats.append(plan.stats)
    t_now = 0.0
    offset = 0                      # index of t_now within plan.states

    while t_now < cfg.max_time:
        # the first n_exec samples from the current plan are executed; a new
        # plan is spliced in at t_now + t_plan
        if offset + n_exec >= len(plan.states):
            return fail(f"plan too short at t={t_now:.1f}s, s={s_prev:.1f}")
        seg = plan.states[offset:offset + n_gap]
        replan_state = plan.states[offset + n_gap]
        try:
            new_plan = planner.search(replan_state)
        except PlanningError as exc:
            return fail(f"replanning failed at t={t_now:.1f}s: {exc}")
        plan_stats.append(new_plan.stats)
        if len(new_plan.states) <= n_exec - n_gap:
            return fail(f"replanned trajectory too short at t={t_now:.1f}s")
        seg = seg + new_plan.states[:n_exec - n_gap]
        plan = new_plan
        offset = n_exec - n_gap

        for st in seg:
            if executed:
                ds = _wrap_ds(st.s - s_prev, track.length)
                s_acc += ds
            executed.append(st)
            s_prev = st.s
            if s_acc >= track.length:
                lap_time = st.t
                break
        if not math.isnan(lap_time):
            break
        t_now += cfg.t_rep

    if math.isnan(lap_time):
        return fail(f"lap not completed within {cfg.max_time:.0f}s simulated")

    return LapResult(True, lap_time, track.length / lap_time, executed,
                     plan_stats, _drift_intervals(executed, cfg.beta_drift))


def _drift_intervals(states, beta_drift):
    intervals = []
    start = None
    for st in states:
        if abs(st.beta) > beta_drift:
            if start is None:
                start = st.t
            end = st.t
        elif start is not None:
            intervals.append((start, end))
            start = None
    if start is not None:
        intervals.append((start, end))
    return intervals


def lap_time_of(states, track) -> float:
    """Quadrature of dt = ds / (v cos(psi + beta - psi_road)) along an
    executed trajectory; must agree with the time stamps."""
    if len(states) < 2:
        raise ValueError("trajectory too short")
    s = np.array([st.s for st in states])
    v = np.array([st.v for st in states])
    theta = np.array([st.psi + st.beta for st in states]) \
        - np.asarray(track.road_heading(s))
    ds = _wrap_ds(np.diff(s), track.length)
    if ds.sum() < track.length * (1.0 - 1e-6):
        raise ValueError("trajectory does not span a full lap")
    rate = v * np.cos(theta)
    if np.any(rate <= 1e-6):
        raise ValueError("trajectory stalls or moves against the road")
    # trapezoidal in 1/rate
    inv = 1.0 / rate
    return float(np.sum(0.5 * (inv[1:] + inv[:-1]) * ds))


def aggregate_stats(plan_stats) -> StatsSummary:
    if not plan_stats:
        raise ValueError("no plans to aggregate")
    walls = [p.wall_ms for p in plan_stats]
    nodes = [p.nodes_expanded for p in plan_stats]
    return StatsSummary(
        n_plans=len(plan_stats),
        wall_ms_median=statistics.median(walls),
        wall_ms_mean=statistics.fmean(walls),
        wall_ms_max=max(walls),
        nodes_median=statistics.median(nodes),
        nodes_max=max(nodes),
    )
