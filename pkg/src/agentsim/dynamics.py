"""Vehicle dynamics: two PID loops on a kinematic single-track model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

from agentsim.messages import MotionRequest, MovingObjectState, Pose2, TrafficUpdate


@dataclass(frozen=True)
class PIDGains:
    kp: float = 0.0
    ki: float = 0.0
    kd: float = 0.0


@dataclass
class PIDState:
    integral: float = 0.0
    prev_error: Optional[float] = None


def pid_step(state: PIDState, gains: PIDGains, error: float, dt: float,
             out_min: float = -math.inf, out_max: float = math.inf) -> float:
    """One PID update; mutates ``state`` and returns the clamped output.

    The integral term is accumulated before the output is formed. Anti-windup:
    when the output saturates, the integrator is clamped back to the value
    that just reaches the limit. The first derivative sample is zero.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    state.integral += error * dt
    deriv = 0.0 if state.prev_error is None else (error - state.prev_error) / dt
    state.prev_error = error
    p_d = gains.kp * error + gains.kd * deriv
    out = p_d + gains.ki * state.integral
    if out > out_max or out < out_min:
        limit = out_max if out > out_max else out_min
        if gains.ki != 0:
            state.integral = (limit - p_d) / gains.ki
        out = limit
    return out


@dataclass(frozen=True)
class DynamicsParameters:
    wheelbase: float = 2.8
    pid_long: PIDGains = PIDGains(0.05, 3.0, 0.0)
    pid_lat: PIDGains = PIDGains(0.2, 12.0, 0.0)
    pedal_to_accel_gain: float = 6.0
    steer_max: float = 0.6
    a_min: float = -6.0
    a_max_act: float = 3.0

    def __post_init__(self):
        if not self.wheelbase > 0:
            raise ValueError("wheelbase must be positive")
        if not self.a_min < 0 < self.a_max_act:
            raise ValueError("need a_min < 0 < a_max_act")
        if not self.pedal_to_accel_gain > 0:
            raise ValueError("pedal_to_accel_gain must be positive")
        if not self.steer_max > 0:
            raise ValueError("steer_max must be positive")


@dataclass(frozen=True)
class VehicleState:
    pose: Pose2
    v: float = 0.0
    a: float = 0.0
    steer: float = 0.0


@dataclass
class DynamicsState:
    """Mutable controller state owned by one vehicle."""

    vehicle: VehicleState
    pedal: float = 0.0
    long_pid: PIDState = field(default_factory=PIDState)
    lat_pid: PIDState = field(default_factory=PIDState)
    last_request: MotionRequest = MotionRequest(0.0, 0.0)
    diagnostics: list = field(default_factory=list)


def integrate_single_track(vs: VehicleState, a: float, steer: float, wheelbase: float,
                           dt: float) -> VehicleState:
    """Explicit Euler step of the kinematic single-track model; ``v >= 0``."""
    p = vs.pose
    v = vs.v
    yaw_rate = v * math.tan(steer) / wheelbase
    x = p.x + v * math.cos(p.yaw) * dt
    y = p.y + v * math.sin(p.yaw) * dt
    yaw = p.yaw + yaw_rate * dt
    v_new = max(v + a * dt, 0.0)
    return VehicleState(Pose2(x, y, yaw), v_new, a, steer)


def step_dynamics(state: DynamicsState, request: MotionRequest, params: DynamicsParameters,
                  dt: float) -> VehicleState:
    """Advance one vehicle by ``dt`` tracking the requested (a_des, kappa_des).

    Longitudinal: PID on acceleration error drives the pedal; realized
    acceleration is ``pedal * gain`` clamped to the actuation range. Lateral:
    PID on steer error towards ``atan(wheelbase * kappa_des)``. At standstill
    braking is absorbed by the brakes (no reverse) and the pedal integrator is
    held so it does not wind up.
    """
    if dt == 0:
        return state.vehicle
    if dt < 0:
        raise ValueError("dt must be non-negative")
    if not (math.isfinite(request.a_des) and math.isfinite(request.kappa_des)):
        state.diagnostics.append("non-finite request; holding previous actuation")
        request = state.last_request
    state.last_request = request
    vs = state.vehicle
    g = params.pedal_to_accel_gain
    p_min, p_max = params.a_min / g, params.a_max_act / g
    a_target = min(max(request.a_des, params.a_min), params.a_max_act)

    if vs.v <= 0.0 and a_target <= 0.0:
        # stationary and asked to brake: the brakes hold, the loop restarts from rest
        state.long_pid = PIDState()
        state.pedal = 0.0
        a = 0.0
    else:
        err = a_target - vs.a
        state.pedal = pid_step(state.long_pid, params.pid_long, err, dt, p_min, p_max)
        a = min(max(state.pedal * g, params.a_min), params.a_max_act)

    steer_target = math.atan(params.wheelbase * request.kappa_des)
    steer_target = min(max(steer_target, -params.steer_max), params.steer_max)
    steer = pid_step(state.lat_pid, params.pid_lat, steer_target - vs.steer, dt,
                     -params.steer_max, params.steer_max)

    new = integrate_single_track(vs, a, steer, params.wheelbase, dt)
    if new.v == 0.0 and a < 0.0:
        new = replace(new, a=0.0)
    state.vehicle = new
    return new


def direct_pass_step(vs: VehicleState, request: MotionRequest, params: DynamicsParameters,
                     dt: float) -> VehicleState:
    """Apply a MotionRequest without controllers (host-side integration)."""
    if dt == 0:
        return vs
    a = min(max(request.a_des, params.a_min), params.a_max_act)
    if vs.v <= 0.0 and a < 0.0:
        a = 0.0
    steer = math.atan(params.wheelbase * request.kappa_des)
    steer = min(max(steer, -params.steer_max), params.steer_max)
    new = integrate_single_track(vs, a, steer, params.wheelbase, dt)
    if new.v == 0.0 and a < 0.0:
        new = replace(new, a=0.0)
    return new


def traffic_update(vs: VehicleState, obj_id: str, t: float, length: float = 4.5, width: float = 1.8,
                   lane_id: Optional[str] = None, s: float = 0.0) -> TrafficUpdate:
    return TrafficUpdate(t, MovingObjectState(obj_id, vs.pose, vs.v, vs.a, length, width, lane_id, s))
