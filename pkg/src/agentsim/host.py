"""Component host: descriptor, lifecycle, buffer handles and agent instances.

A host instantiates one independent ``ComponentInstance`` per road user. Scalar
parameters are set by name; messages travel as encoded byte buffers behind
integer handles kept in a ``BufferRegistry``.
"""

from __future__ import annotations

import json
import logging
import math
import threading
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Optional

from agentsim.adapter import AdapterParameters, AgentAdapter
from agentsim.behavior import BehaviorModel, BehaviorParameters
from agentsim.dynamics import (
    DynamicsParameters, DynamicsState, PIDGains, VehicleState, step_dynamics, traffic_update,
)
from agentsim.lanemap import MapModel
from agentsim.messages import (
    DecodeError, MotionRequest, SensorView, TrafficCommand, decode, encode, normalize_angle,
    validate_sensor_view,
)

log = logging.getLogger(__name__)

INSTANTIATED = "instantiated"
INITIALIZED = "initialized"
STEPPING = "stepping"
TERMINATED = "terminated"

PORT_SENSOR_VIEW = "SensorView"
PORT_TRAFFIC_COMMAND = "TrafficCommand"
PORT_TRAFFIC_UPDATE = "TrafficUpdate"
PORT_MOTION_REQUEST = "MotionRequest"


class HostError(RuntimeError):
    """Base class for host-side errors."""


class DescriptorError(HostError):
    pass


class LifecycleError(HostError):
    pass


class UnknownName(HostError, KeyError):
    def __str__(self):
        return self.args[0] if self.args else ""


class StaleHandle(HostError):
    pass


class StepError(HostError):
    pass


# -- descriptor ---------------------------------------------------------------

_TYPES = {"real": float, "int": int, "bool": bool}


@dataclass(frozen=True)
class ParameterSpec:
    name: str
    type: str
    default: Any
    description: str = ""


@dataclass(frozen=True)
class ComponentDescriptor:
    name: str
    version: str
    parameters: tuple[ParameterSpec, ...]
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]

    def __post_init__(self):
        ports = list(self.inputs) + list(self.outputs)
        dup = {p for p in ports if ports.count(p) > 1}
        if dup:
            raise DescriptorError(f"duplicate port name(s): {sorted(dup)}")
        names = [p.name for p in self.parameters]
        dup = {n for n in names if names.count(n) > 1}
        if dup:
            raise DescriptorError(f"duplicate parameter name(s): {sorted(dup)}")
        for p in self.parameters:
            if p.type not in _TYPES:
                raise DescriptorError(f"parameter {p.name}: unknown type {p.type!r}")
            if p.default is None:
                raise DescriptorError(f"parameter {p.name} has no default")

    def parameter(self, name: str) -> ParameterSpec:
        for p in self.parameters:
            if p.name == name:
                return p
        raise UnknownName(f"unknown parameter {name!r}")

    def defaults(self) -> dict[str, Any]:
        return {p.name: p.default for p in self.parameters}

    def to_dict(self) -> dict:
        return {
            "name": self.name, "version": self.version,
            "parameters": [{"name": p.name, "type": p.type, "default": p.default,
                            "description": p.description} for p in self.parameters],
            "inputs": list(self.inputs), "outputs": list(self.outputs),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ComponentDescriptor":
        try:
            params = tuple(ParameterSpec(p["name"], p["type"], p.get("default"), p.get("description", ""))
                           for p in d["parameters"])
            return cls(str(d["name"]), str(d["version"]), params,
                       tuple(d["inputs"]), tuple(d["outputs"]))
        except (KeyError, TypeError) as exc:
            raise DescriptorError(f"malformed descriptor: {exc!r}") from None


_DESCRIPTIONS = {
    "a_max": "maximum desired acceleration [m/s^2]",
    "delta": "free-driving exponent",
    "T": "desired time headway [s]",
    "s0": "standstill net distance [m]",
    "a": "interaction acceleration scale [m/s^2]",
    "b": "comfortable deceleration, also the safe-stop request [m/s^2]",
    "T_max": "preview horizon time [s]",
    "a_lat_max": "comfortable lateral acceleration [m/s^2]",
    "v_desired": "desired speed [m/s]",
    "k_near": "near-point bearing gain [1/m]",
    "k_far": "far-point bearing gain [1/m]",
    "k_damp": "near-point bearing rate gain [s/m]",
    "d_near0": "near-point base distance [m]",
    "t_near": "near-point speed-proportional distance [s]",
    "d_far0": "far-point base distance [m]",
    "t_far": "far-point speed-proportional distance [s]",
    "lc_duration": "lane-change offset fade time [s]",
    "lateral_bias": "constant lateral offset from the lane center, left positive [m]",
    "kappa_max": "bound on requested curvature [1/m]",
    "t_arrive": "time margin for arriving at a preview speed constraint [s]",
    "w_ramp": "fraction of T_max over which preview reactions fade in",
    "wheelbase": "wheelbase [m]",
    "pedal_to_accel_gain": "acceleration per unit pedal [m/s^2]",
    "steer_max": "front-wheel angle limit [rad]",
    "a_min": "actuation deceleration floor [m/s^2]",
    "a_max_act": "actuation acceleration ceiling [m/s^2]",
    "g_front": "minimum free gap ahead on the target lane to start a lane change [m]",
    "g_rear": "minimum free gap behind on the target lane to start a lane change [m]",
    "lc_end_margin": "distance kept before crossing zones and lane ends [m]",
    "lane_change_penalty": "routing cost of one lane change [m]",
    "lc_settle_tol": "lateral tolerance that marks a lane change as completed [m]",
    "stop_release_speed": "speed below which a vehicle counts as stopped [m/s]",
    "stop_release_dist": "front distance to a stop line within which release is checked [m]",
    "claim_zone": "length before other stop lines where waiting vehicles claim priority [m]",
    "conflict_clearance": "distance a crossing vehicle's rear must be past the shared point [m]",
    "departing_accel": "acceleration above which a vehicle at a stop line counts as departing [m/s^2]",
    "accept_gap": "time gap demanded from priority traffic before leaving a stop line [s]",
    "priority_dist": "distance to the junction within which priority traffic always blocks [m]",
    "length": "vehicle length [m]",
    "width": "vehicle width [m]",
    "direct_pass": "emit MotionRequest only and let the host integrate the motion",
    "debug": "record the driver input of every step",
}


def _param_specs() -> list[ParameterSpec]:
    specs = []
    for cls in (BehaviorParameters, AdapterParameters):
        inst = cls()
        for f in fields(cls):
            specs.append(ParameterSpec(f.name, "real", float(getattr(inst, f.name)),
                                       _DESCRIPTIONS.get(f.name, "")))
    dyn = DynamicsParameters()
    for f in fields(DynamicsParameters):
        val = getattr(dyn, f.name)
        if isinstance(val, PIDGains):
            for g in ("kp", "ki", "kd"):
                specs.append(ParameterSpec(f"{f.name}_{g}", "real", float(getattr(val, g)),
                                           f"{'longitudinal' if f.name == 'pid_long' else 'steering'} PID {g}"))
        else:
            specs.append(ParameterSpec(f.name, "real", float(val), _DESCRIPTIONS.get(f.name, "")))
    specs += [
        ParameterSpec("length", "real", 4.5, _DESCRIPTIONS["length"]),
        ParameterSpec("width", "real", 1.8, _DESCRIPTIONS["width"]),
        ParameterSpec("direct_pass", "bool", False, _DESCRIPTIONS["direct_pass"]),
        ParameterSpec("debug", "bool", False, _DESCRIPTIONS["debug"]),
    ]
    return specs


def build_descriptor() -> ComponentDescriptor:
    """Descriptor derived from the parameter dataclasses' defaults."""
    from agentsim import __version__
    return ComponentDescriptor(
        "agentsim-agent", __version__, tuple(_param_specs()),
        (PORT_SENSOR_VIEW, PORT_TRAFFIC_COMMAND), (PORT_TRAFFIC_UPDATE, PORT_MOTION_REQUEST),
    )


def load_descriptor(path=None) -> ComponentDescriptor:
    """Read a descriptor file; defaults to the packaged ``descriptor.json``."""
    if path is None:
        text = resources.files("agentsim").joinpath("data/descriptor.json").read_text()
        source = "descriptor.json"
    else:
        text = Path(path).read_text()
        source = str(path)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DescriptorError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return ComponentDescriptor.from_dict(data)


# -- buffers ------------------------------------------------------------------

class BufferRegistry:
    """Opaque integer handles to immutable encoded messages."""

    def __init__(self):
        self._buffers: dict[int, bytes] = {}
        self._next = 1
        self._lock = threading.Lock()

    def put(self, data: bytes) -> int:
        with self._lock:
            h = self._next
            self._next += 1
            self._buffers[h] = bytes(data)
            return h

    def get(self, handle: int) -> bytes:
        try:
            return self._buffers[handle]
        except KeyError:
            raise StaleHandle(f"unknown or released handle {handle}") from None

    def release(self, handle: int) -> None:
        with self._lock:
            if self._buffers.pop(handle, None) is None:
                raise StaleHandle(f"unknown or released handle {handle}")

    def __contains__(self, handle) -> bool:
        return handle in self._buffers

    def __len__(self) -> int:
        return len(self._buffers)


# -- instances ----------------------------------------------------------------

def _coerce(spec: ParameterSpec, value: Any) -> Any:
    if spec.type == "bool":
        if not isinstance(value, bool):
            raise TypeError(f"parameter {spec.name} expects bool, got {type(value).__name__}")
        return value
    if spec.type == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"parameter {spec.name} expects int, got {type(value).__name__}")
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise TypeError(f"parameter {spec.name} expects real, got {type(value).__name__}")
    value = float(value)
    if not math.isfinite(value):
        raise ValueError(f"parameter {spec.name} must be finite")
    return value


def split_parameters(values: dict[str, Any]) -> tuple[BehaviorParameters, AdapterParameters, DynamicsParameters]:
    bp = BehaviorParameters(**{f.name: values[f.name] for f in fields(BehaviorParameters)})
    ap = AdapterParameters(**{f.name: values[f.name] for f in fields(AdapterParameters)})
    dyn = {}
    for f in fields(DynamicsParameters):
        if f.name in ("pid_long", "pid_lat"):
            dyn[f.name] = PIDGains(values[f"{f.name}_kp"], values[f"{f.name}_ki"], values[f"{f.name}_kd"])
        else:
            dyn[f.name] = values[f.name]
    return bp, ap, DynamicsParameters(**dyn)


class ComponentInstance:
    """One agent: adapter, behavior and dynamics behind the host interface."""

    def __init__(self, instance_id: str, descriptor: ComponentDescriptor, host: "ComponentHost"):
        self.id = instance_id
        self.descriptor = descriptor
        self.host = host
        self.state = INSTANTIATED
        self.values = descriptor.defaults()
        self._inputs: dict[str, int] = {}
        self._outputs: dict[str, int] = {}
        self._dirty = True
        self.adapter: Optional[AgentAdapter] = None
        self.behavior: Optional[BehaviorModel] = None
        self.dynamics: Optional[DynamicsState] = None
        self.outputs: dict[str, float] = {}
        self.events: list[tuple[float, str, str]] = []
        self.diagnostics: list[str] = []
        self.debug_log: list[dict] = []
        self._map: Optional[MapModel] = None
        self._prev_t: Optional[float] = None
        log.debug("instantiated %s", instance_id)

    # lifecycle

    def _require(self, *states: str, op: str) -> None:
        if self.state not in states:
            raise LifecycleError(f"{op} not allowed in state {self.state!r} (instance {self.id})")

    def initialize(self) -> None:
        self._require(INSTANTIATED, op="initialize")
        self._build_models()
        self.state = INITIALIZED
        log.debug("initialized %s", self.id)

    def reset(self) -> None:
        """Return to t = 0 keeping parameter values."""
        self._require(INITIALIZED, STEPPING, op="reset")
        for h in list(self._inputs.values()) + list(self._outputs.values()):
            if h in self.host.registry:
                self.host.registry.release(h)
        self._inputs.clear()
        self._outputs.clear()
        self._build_models()
        self.state = INITIALIZED

    def terminate(self) -> None:
        self._require(INSTANTIATED, INITIALIZED, STEPPING, op="terminate")
        for h in list(self._inputs.values()) + list(self._outputs.values()):
            if h in self.host.registry:
                self.host.registry.release(h)
        self._inputs.clear()
        self._outputs.clear()
        self.state = TERMINATED

    def _build_models(self) -> None:
        self.bp, self.ap, self.dp = split_parameters(self.values)
        self.adapter = None
        self.behavior = BehaviorModel(self.bp)
        self.dynamics = None
        self.outputs = {}
        self.events = []
        self.debug_log = []
        self._prev_t = None
        self._dirty = False

    def _apply_parameters(self) -> None:
        self.bp, self.ap, self.dp = split_parameters(self.values)
        self.behavior.params = self.bp
        if self.adapter is not None:
            self.adapter.params = self.ap
            self.adapter.T_max = self.bp.T_max
            self.adapter.lc_duration = self.bp.lc_duration
            self.adapter.lateral_bias = self.bp.lateral_bias
        self._dirty = False

    # scalar variables and ports

    def set_parameter(self, name: str, value: Any) -> None:
        self._require(INSTANTIATED, INITIALIZED, STEPPING, op="set_parameter")
        spec = self.descriptor.parameter(name)
        new = dict(self.values)
        new[name] = _coerce(spec, value)
        split_parameters(new)  # validates ranges before committing
        self.values = new
        self._dirty = True

    def get_parameter(self, name: str) -> Any:
        self.descriptor.parameter(name)
        return self.values[name]

    def set_input(self, port: str, handle: int) -> None:
        self._require(INITIALIZED, STEPPING, op="set_input")
        if port not in self.descriptor.inputs:
            raise UnknownName(f"unknown input port {port!r}")
        self.host.registry.get(handle)
        old = self._inputs.get(port)
        if old is not None and old != handle and old in self.host.registry:
            self.host.registry.release(old)
        self._inputs[port] = handle

    def get_output(self, port: str) -> Optional[int]:
        self._require(INITIALIZED, STEPPING, op="get_output")
        if port not in self.descriptor.outputs:
            raise UnknownName(f"unknown output port {port!r}")
        return self._outputs.get(port)

    def get_real(self, name: str) -> float:
        if name not in self.outputs:
            raise UnknownName(f"unknown output variable {name!r}")
        return self.outputs[name]

    # stepping

    def do_step(self, t_start: float, dt: float) -> None:
        self._require(INITIALIZED, STEPPING, op="do_step")
        reg = self.host.registry
        sv_handle = self._inputs.get(PORT_SENSOR_VIEW)
        if sv_handle is None:
            raise StepError(f"instance {self.id}: no SensorView latched for step at t={t_start}")
        try:
            view = decode(reg.get(sv_handle))
            cmd_handle = self._inputs.get(PORT_TRAFFIC_COMMAND)
            cmd = decode(reg.get(cmd_handle)) if cmd_handle is not None else None
        except DecodeError as exc:
            raise StepError(f"instance {self.id}: {exc}") from None
        if not isinstance(view, SensorView) or (cmd is not None and not isinstance(cmd, TrafficCommand)):
            raise StepError(f"instance {self.id}: wrong message type on input port")
        map_model = self.host.maps.get(view.lanes_ref)
        if map_model is None:
            raise StepError(f"instance {self.id}: unknown map {view.lanes_ref!r}")
        report = validate_sensor_view(view, map_model, self._prev_t)
        if "ego absent" in report.codes() or "ego duplicated" in report.codes():
            raise StepError(f"instance {self.id}: {report.codes()}")

        # inputs are consumed by this step
        for port in (PORT_SENSOR_VIEW, PORT_TRAFFIC_COMMAND):
            h = self._inputs.pop(port, None)
            if h is not None:
                reg.release(h)
        for h in self._outputs.values():
            if h in reg:
                reg.release(h)
        self._outputs = {}

        if self._dirty:
            self._apply_parameters()
        ego = view.ego()
        if self.adapter is None:
            self._map = map_model
            self.adapter = AgentAdapter(map_model, self.ap, self.bp.T_max, self.bp.lc_duration,
                                        self.bp.lateral_bias)
        if self.dynamics is None:
            self.dynamics = DynamicsState(VehicleState(ego.pose, ego.velocity, ego.acceleration))
        self.diagnostics = [f.code for f in report.findings]

        inp = self.adapter.step(view, cmd)
        request_out = self.behavior.step(inp, dt)
        request = MotionRequest(request_out.a_des, request_out.kappa_des)
        t_end = t_start + dt
        self._outputs[PORT_MOTION_REQUEST] = reg.put(encode(request))
        if not self.values["direct_pass"]:
            if view.ego() is not None and self.dynamics.vehicle.pose != ego.pose:
                # ground truth moved the vehicle: adopt it
                self.dynamics.vehicle = VehicleState(ego.pose, ego.velocity, ego.acceleration,
                                                     self.dynamics.vehicle.steer)
            vs = step_dynamics(self.dynamics, request, self.dp, dt)
            lane_id, s, _ = self.adapter.localize(vs.pose.x, vs.pose.y)
            upd = traffic_update(vs, self.id, t_end, self.values["length"], self.values["width"],
                                 lane_id, s)
            self._outputs[PORT_TRAFFIC_UPDATE] = reg.put(encode(upd))

        g = self.behavior.state
        lead = inp.lead
        v = ego.velocity
        self.outputs = {
            "a_des": request.a_des, "kappa_des": request.kappa_des,
            "v_T": g.v_T, "v_T_pred": g.v_T_pred,
            "lane_d": inp.lane_d,
            "lead_gap": lead.gap if lead.present else math.nan,
            "thw": lead.gap / v if lead.present and v > 0.1 else math.nan,
            "stop_ds": g.stop_ds if g.stop_ds is not None else math.nan,
            "lc_progress": g.lc_progress if g.lc_progress is not None else math.nan,
            "route_s": inp.horizon.ego_s_on_route,
            "yaw_offset": normalize_angle(
                ego.pose.yaw - inp.horizon.path.pose_at(inp.horizon.ego_s_on_route)[2]),
        }
        self.events = [(t_end, kind, detail) for kind, detail in self.adapter.events]
        self.diagnostics += list(g.diagnostics) + self.adapter.diagnostics
        self.adapter.diagnostics = []
        if self.values["debug"]:
            self.debug_log.append(inp.to_dict())
        self._prev_t = view.timestamp
        self.state = STEPPING


class ComponentHost:
    """Owns the buffer registry, the shared maps and the agent instances."""

    def __init__(self, descriptor: Optional[ComponentDescriptor] = None):
        self.descriptor = descriptor or load_descriptor()
        self.registry = BufferRegistry()
        self.maps: dict[str, MapModel] = {}
        self.instances: dict[str, ComponentInstance] = {}

    def publish_map(self, map_model: MapModel) -> str:
        self.maps[map_model.version] = map_model
        return map_model.version

    def instantiate(self, instance_id: str, descriptor: Optional[ComponentDescriptor] = None) -> ComponentInstance:
        if instance_id in self.instances and self.instances[instance_id].state != TERMINATED:
            raise HostError(f"instance {instance_id!r} already exists")
        desc = descriptor or self.descriptor
        if not isinstance(desc, ComponentDescriptor):
            raise DescriptorError("not a component descriptor")
        inst = ComponentInstance(instance_id, desc, self)
        self.instances[instance_id] = inst
        return inst

    def put(self, msg) -> int:
        return self.registry.put(encode(msg))

    def take(self, handle: int):
        return decode(self.registry.get(handle))


# -- replay -------------------------------------------------------------------

@dataclass(frozen=True)
class StepRecord:
    """Inputs of one instance step, as encoded bytes."""

    t_start: float
    dt: float
    sensor_view: bytes
    traffic_command: Optional[bytes] = None


def replay(records: Iterable[StepRecord], map_model: MapModel, parameters: dict[str, Any],
           instance_id: str = "replay") -> list[tuple[Optional[bytes], Optional[bytes]]]:
    """Feed a recorded input stream to a fresh instance.

    Returns the encoded ``(TrafficUpdate, MotionRequest)`` pair of each step.
    """
    host = ComponentHost()
    host.publish_map(map_model)
    inst = host.instantiate(instance_id)
    for name, value in parameters.items():
        inst.set_parameter(name, value)
    inst.initialize()
    out = []
    for rec in records:
        inst.set_input(PORT_SENSOR_VIEW, host.registry.put(rec.sensor_view))
        if rec.traffic_command is not None:
            inst.set_input(PORT_TRAFFIC_COMMAND, host.registry.put(rec.traffic_command))
        inst.do_step(rec.t_start, rec.dt)
        tu = inst.get_output(PORT_TRAFFIC_UPDATE)
        mr = inst.get_output(PORT_MOTION_REQUEST)
        out.append((host.registry.get(tu) if tu is not None else None,
                    host.registry.get(mr) if mr is not None else None))
    return out
