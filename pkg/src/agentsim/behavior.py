"""Driver behavior: longitudinal reactions, predictive speed and steering.

Longitudinal control sums three dimensionless reaction terms (free driving,
stopping, following) into a desired acceleration
``a_des = a_max * (1 - (r_free + r_stop + r_follow))``. Lateral control is a
two-point visual law on the route reference line shifted by the current
lateral offset target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from agentsim.adapter import DriverInput, LateralReference, VirtualHorizon, smoothstep
from agentsim.lanemap import Route
from agentsim.messages import Pose2, normalize_angle

EPS_V = 0.1
EPS_S = 0.1
EPS_KAPPA = 1e-6
R_MAX = 10.0
MIN_LOOKAHEAD = 2.0

FOLLOW = "follow"
STOP = "stop"


@dataclass(frozen=True)
class BehaviorParameters:
    a_max: float = 1.5
    delta: float = 4.0
    T: float = 2.0
    s0: float = 2.0
    a: float = 1.0
    b: float = 2.0
    T_max: float = 10.0
    a_lat_max: float = 1.5
    v_desired: float = 13.89
    k_near: float = 0.3
    k_far: float = 0.1
    k_damp: float = 0.05
    d_near0: float = 3.0
    t_near: float = 0.4
    d_far0: float = 10.0
    t_far: float = 1.2
    lc_duration: float = 4.0
    lateral_bias: float = 0.0
    kappa_max: float = 0.2
    t_arrive: float = 1.0
    w_ramp: float = 0.25

    def __post_init__(self):
        for name in ("a_max", "a", "b", "T", "T_max", "a_lat_max", "lc_duration", "kappa_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.delta >= 1:
            raise ValueError("delta must be >= 1")
        if not self.s0 >= 0:
            raise ValueError("s0 must be non-negative")


@dataclass(frozen=True)
class GuidanceState:
    v_T: float = 0.0
    v_T_pred: float = 0.0
    stop_ds: Optional[float] = None
    lc_progress: Optional[float] = None
    theta_near: Optional[float] = None
    r_free: float = 0.0
    r_stop: float = 0.0
    r_follow: float = 0.0
    diagnostics: tuple[str, ...] = ()
    route: Optional[Route] = None


@dataclass(frozen=True)
class StabilizationOutput:
    a_des: float
    kappa_des: float


# -- longitudinal -------------------------------------------------------------

def reaction_free(v: float, v_T: float, delta: float = 4.0) -> float:
    """Free-driving reaction; 1 at the target speed, symmetric around it."""
    dv = v_T - v
    x = min(abs(dv) / v_T, 1.0)
    if dv >= 0:
        return (1.0 - x) ** delta
    return 2.0 - (1.0 - x) ** delta


def _free_or_stop(v: float, v_T: float, p: BehaviorParameters) -> float:
    if v_T > EPS_V:
        return reaction_free(v, v_T, p.delta)
    # no usable target speed: brake towards rest, scaled by the desired speed
    return 2.0 - (1.0 - min(v / max(p.v_desired, EPS_V), 1.0)) ** p.delta


def reaction_follow_stop(v: float, v_pre: float, ds: float, p: BehaviorParameters,
                         mode: str = FOLLOW) -> float:
    """Interaction reaction ``(ds*/ds)^2`` towards a lead vehicle or stop point.

    Following uses the effective headway ``T - s0/v_pre`` so that the
    measured time gap in steady state equals ``T``.
    """
    if mode == STOP:
        v_pre = 0.0
    if ds <= EPS_S:
        return R_MAX
    if mode == FOLLOW and v_pre > EPS_V:
        T_eff = p.T - p.s0 / v_pre
    else:
        T_eff = p.T
    ds_star = p.s0 + v * T_eff + v * (v - v_pre) / (2.0 * math.sqrt(p.a * p.b))
    ds_star = max(ds_star, p.s0)
    return min((ds_star / ds) ** 2, R_MAX)


def curve_speed_limit(kappa: float, a_lat_max: float) -> float:
    k = abs(kappa)
    if k <= EPS_KAPPA:
        return math.inf
    return math.sqrt(a_lat_max / k)


def combine_acceleration(r_free: float, r_stop: float, r_follow: float, a_max: float) -> float:
    return a_max * (1.0 - (r_free + r_stop + r_follow))


def predictive_target_speed(horizon: VirtualHorizon, p: BehaviorParameters, v: float,
                            v_T_local: Optional[float] = None) -> tuple[float, float]:
    """Most demanding upcoming speed constraint and the effective free reaction.

    Each preview point carries ``c_i = min(limit_i, curve speed_i)``. Points
    stricter than the local target produce a reaction: the kinematic
    deceleration needed to arrive at ``c_i`` a short time (``t_arrive``)
    before the point, or the free reaction towards ``c_i`` once there. The
    reaction is blended in by reachability: weight 0 when reaching the point
    takes ``T_max`` or longer, 1 when it takes ``(1 - w_ramp) * T_max`` or
    less. The more conservative of local and preview reactions wins.
    """
    if v_T_local is None:
        v_T_local = p.v_desired
    r_local = _free_or_stop(v, v_T_local, p)
    ds = horizon.ds
    with np.errstate(divide="ignore"):
        curve = np.sqrt(p.a_lat_max / np.maximum(np.abs(horizon.kappa), EPS_KAPPA))
    curve = np.where(np.abs(horizon.kappa) <= EPS_KAPPA, np.inf, curve)
    lim = np.where(np.isnan(horizon.speed_limit), np.inf, horizon.speed_limit)
    c = np.minimum(lim, curve)
    active = (c < v_T_local) & (ds <= max(v * p.T_max, ds[-1]))
    if not active.any():
        return v_T_local, r_local
    ds_a = ds[active]
    c_a = c[active]
    tau = 2.0 * ds_a / np.maximum(v + c_a, EPS_V)
    w = np.clip((p.T_max - tau) / (p.w_ramp * p.T_max), 0.0, 1.0)
    ds_eff = ds_a - c_a * p.t_arrive
    r_target = np.empty_like(c_a)
    brake = (v > c_a) & (ds_eff > 0)
    a_req = (v * v - c_a[brake] ** 2) / (2.0 * ds_eff[brake])
    r_target[brake] = 1.0 + a_req / p.a_max
    rest = ~brake
    if rest.any():
        r_target[rest] = [_free_or_stop(v, ci, p) for ci in c_a[rest]]
    r_pred = r_local + w * (np.minimum(r_target, R_MAX) - r_local)
    i = int(np.argmax(r_pred))
    if r_pred[i] <= r_local:
        return v_T_local, r_local
    return float(c_a[i]), float(r_pred[i])


# -- lateral ------------------------------------------------------------------

def lane_change_offset(offset_width: float, t_since_start: float, lc_duration: float) -> float:
    """Smoothstep fade ``w * (3u^2 - 2u^3)`` of the lateral offset target."""
    return offset_width * smoothstep(t_since_start / lc_duration)


def _bearing(pose: Pose2, x: float, y: float) -> float:
    return normalize_angle(math.atan2(y - pose.y, x - pose.x) - pose.yaw)


def _reference_points(pose: Pose2, v: float, horizon: VirtualHorizon, lateral: LateralReference,
                      t: float, p: BehaviorParameters) -> tuple[float, float, float]:
    """Bearings to the near and far points, plus the near bearing without offset."""
    path = horizon.path
    end = max(horizon.end, MIN_LOOKAHEAD)
    out = []
    for base, per_v in ((p.d_near0, p.t_near), (p.d_far0, p.t_far)):
        ds = min(base + v * per_v, end)
        rs = horizon.ego_s_on_route + ds
        x, y, h = path.pose_at(rs)
        if not out:
            raw = _bearing(pose, x, y)
        o = lateral.offset(rs, t + ds / max(v, 1.0))
        out.append(_bearing(pose, x - o * math.sin(h), y + o * math.cos(h)))
    return out[0], out[1], raw


def steer_two_point(pose: Pose2, v: float, horizon: VirtualHorizon, lateral: LateralReference,
                    t: float, p: BehaviorParameters, dt: float,
                    prev_theta_near: Optional[float] = None) -> tuple[float, float]:
    """Curvature from bearings to a near and a far reference point.

    ``kappa = k_near*theta_n + k_far*theta_f + k_damp*dtheta/dt``. Offsets
    ahead are evaluated at the time the vehicle reaches each point. The
    damping rate is a backward difference of the near bearing to the
    unshifted reference line, so steps in the offset target (a lane change
    being triggered) do not kick the derivative. Returns ``(kappa, theta)``
    where ``theta`` is that unshifted bearing, to be passed back next step.
    """
    theta_n, theta_f, theta_raw = _reference_points(pose, v, horizon, lateral, t, p)
    kappa = p.k_near * theta_n + p.k_far * theta_f
    if prev_theta_near is not None and dt > 0:
        kappa += p.k_damp * normalize_angle(theta_raw - prev_theta_near) / dt
    return kappa, theta_raw


# -- orchestration ------------------------------------------------------------

def _safe_stop(p: BehaviorParameters, state: GuidanceState, why: str):
    out = StabilizationOutput(-p.b, 0.0)
    return out, replace(state, diagnostics=(why,))


def step_behavior(inp: DriverInput, p: BehaviorParameters, state: GuidanceState,
                  dt: float) -> tuple[StabilizationOutput, GuidanceState]:
    ego = inp.ego
    v = ego.velocity
    pose = ego.pose
    if not all(math.isfinite(x) for x in (v, pose.x, pose.y, pose.yaw)) or v < 0:
        return _safe_stop(p, state, "degenerate ego state")
    h = inp.horizon
    if len(h.ds) == 0:
        return _safe_stop(p, state, "empty horizon")
    diags = []

    lim0 = h.speed_limit[0]
    v_T = p.v_desired
    if inp.v_command is not None:
        v_T = min(v_T, inp.v_command)
    if not math.isnan(lim0):
        v_T = min(v_T, float(lim0))
    v_T = max(v_T, 0.0)
    v_T_pred, r_free = predictive_target_speed(h, p, v, v_T)

    r_stop = 0.0
    stop_ds = None
    if h.stop.any():
        i = int(np.argmax(h.stop))
        stop_ds = float(h.ds[i])
        net = float(h.stop_net[i])
        if net <= EPS_S:
            diags.append("stop point inside standstill distance")
        r_stop = reaction_follow_stop(v, 0.0, net, p, STOP)

    r_follow = 0.0
    if inp.lead.present:
        if inp.lead.gap <= EPS_S:
            diags.append("lead gap below guard")
        r_follow = reaction_follow_stop(v, inp.lead.v_pre, inp.lead.gap, p, FOLLOW)

    a_des = combine_acceleration(r_free, r_stop, r_follow, p.a_max)
    prev = state.theta_near if state.route == h.route else None
    kappa, theta_n = steer_two_point(pose, v, h, inp.lateral, inp.timestamp, p, dt, prev)
    kappa = min(max(kappa, -p.kappa_max), p.kappa_max)
    if not (math.isfinite(a_des) and math.isfinite(kappa)):
        return _safe_stop(p, state, "non-finite output")
    new_state = GuidanceState(v_T, v_T_pred, stop_ds, inp.lc_progress, theta_n,
                              r_free, r_stop, r_follow, tuple(diags), h.route)
    return StabilizationOutput(a_des, kappa), new_state


class BehaviorModel:
    """Stateful wrapper holding the guidance state between steps."""

    def __init__(self, params: BehaviorParameters = BehaviorParameters()):
        self.params = params
        self.state = GuidanceState(v_T=params.v_desired, v_T_pred=params.v_desired)

    def step(self, inp: DriverInput, dt: float) -> StabilizationOutput:
        out, self.state = step_behavior(inp, self.params, self.state, dt)
        return out
