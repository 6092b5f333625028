"""Coupling messages exchanged between a host and an agent instance.

Four messages cross the boundary: ``SensorView`` and ``TrafficCommand`` go
in, ``MotionRequest`` and ``TrafficUpdate`` come out. All are frozen
dataclasses; the wire format is self-describing JSON (field names as keys,
a ``"type"`` tag on the top level).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Optional, Union

if TYPE_CHECKING:
    from agentsim.lanemap import MapModel

TWO_PI = 2.0 * math.pi

SIGN_SPEED_LIMIT = "speed_limit"
SIGN_STOP_LINE = "stop_line"
SIGN_KINDS = (SIGN_SPEED_LIMIT, SIGN_STOP_LINE)


def normalize_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    r = math.remainder(theta, TWO_PI)
    if r <= -math.pi:
        r += TWO_PI
    return r


@dataclass(frozen=True, slots=True)
class Pose2:
    x: float
    y: float
    yaw: float = 0.0

    def __post_init__(self):
        if not (-math.pi < self.yaw <= math.pi):
            object.__setattr__(self, "yaw", normalize_angle(self.yaw))


@dataclass(frozen=True, slots=True)
class MovingObjectState:
    id: str
    pose: Pose2
    velocity: float
    acceleration: float = 0.0
    length: float = 4.5
    width: float = 1.8
    lane_id: Optional[str] = None
    s: float = 0.0


@dataclass(frozen=True, slots=True)
class Signal:
    """A speed-limit sign or stop line attached to a lane position."""

    kind: str
    lane_id: str
    s: float
    value: float = 0.0


@dataclass(frozen=True, slots=True)
class SensorView:
    timestamp: float
    ego_id: str
    objects: tuple[MovingObjectState, ...]
    lanes_ref: str = ""
    signals: tuple[Signal, ...] = ()

    def ego(self) -> Optional[MovingObjectState]:
        for obj in self.objects:
            if obj.id == self.ego_id:
                return obj
        return None


@dataclass(frozen=True, slots=True)
class AcquireGlobalPosition:
    x: float
    y: float


@dataclass(frozen=True, slots=True)
class SpeedAction:
    v_target: float


Action = Union[AcquireGlobalPosition, SpeedAction]


@dataclass(frozen=True, slots=True)
class TrafficCommand:
    timestamp: float
    actions: tuple[Action, ...] = ()


@dataclass(frozen=True, slots=True)
class MotionRequest:
    a_des: float
    kappa_des: float


@dataclass(frozen=True, slots=True)
class TrafficUpdate:
    timestamp: float
    state: MovingObjectState


Message = Union[SensorView, TrafficCommand, MotionRequest, TrafficUpdate]


# -- validation ---------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class Finding:
    code: str
    detail: str = ""


@dataclass(frozen=True, slots=True)
class ValidationReport:
    findings: tuple[Finding, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.findings

    def codes(self) -> list[str]:
        return [f.code for f in self.findings]


def _finite(*values: float) -> bool:
    return all(math.isfinite(v) for v in values)


def validate_sensor_view(view: SensorView, map_model: "MapModel",
                         prev_timestamp: Optional[float] = None) -> ValidationReport:
    """Check a SensorView against its invariants and the lane map.

    Never raises; every violation becomes a ``Finding``. ``prev_timestamp``
    enables the monotonic-time check across a run.
    """
    findings: list[Finding] = []
    if not math.isfinite(view.timestamp):
        findings.append(Finding("non-finite", "timestamp"))
    elif prev_timestamp is not None and view.timestamp < prev_timestamp:
        findings.append(Finding("time regression", f"{view.timestamp} < {prev_timestamp}"))

    n_ego = 0
    seen: set[str] = set()
    for obj in view.objects:
        if obj.id == view.ego_id:
            n_ego += 1
        if obj.id in seen:
            findings.append(Finding("duplicate id", obj.id))
        seen.add(obj.id)
        p = obj.pose
        if not _finite(p.x, p.y, p.yaw, obj.velocity, obj.acceleration, obj.s):
            findings.append(Finding("non-finite", obj.id))
        if obj.velocity < 0:
            findings.append(Finding("negative velocity", obj.id))
        if not (obj.length > 0 and obj.width > 0):
            findings.append(Finding("bad dimensions", obj.id))
        if obj.lane_id is not None and obj.lane_id not in map_model.lanes:
            findings.append(Finding("unknown lane", f"{obj.id}: {obj.lane_id}"))
    if n_ego == 0:
        findings.append(Finding("ego absent", view.ego_id))
    elif n_ego > 1:
        findings.append(Finding("ego duplicated", view.ego_id))

    for sig in view.signals:
        if sig.kind not in SIGN_KINDS:
            findings.append(Finding("unknown signal kind", sig.kind))
        if sig.lane_id not in map_model.lanes:
            findings.append(Finding("unknown lane", f"signal: {sig.lane_id}"))
        if not _finite(sig.s, sig.value):
            findings.append(Finding("non-finite", f"signal on {sig.lane_id}"))
    return ValidationReport(tuple(findings))


# -- serialization ------------------------------------------------------------

class DecodeError(ValueError):
    """Raised when a byte sequence is not a well-formed message."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail


def _pose_dict(p: Pose2) -> dict:
    return {"x": p.x, "y": p.y, "yaw": p.yaw}


def _obj_dict(o: MovingObjectState) -> dict:
    return {
        "id": o.id, "pose": _pose_dict(o.pose), "velocity": o.velocity,
        "acceleration": o.acceleration, "length": o.length, "width": o.width,
        "lane_id": o.lane_id, "s": o.s,
    }


def _action_dict(a: Action) -> dict:
    if isinstance(a, AcquireGlobalPosition):
        return {"action": "AcquireGlobalPosition", "x": a.x, "y": a.y}
    if isinstance(a, SpeedAction):
        return {"action": "SpeedAction", "v_target": a.v_target}
    raise TypeError(f"unsupported action {a!r}")


def to_dict(msg: Message) -> dict:
    """Plain-dict form of a message (what ``encode`` serializes)."""
    if isinstance(msg, SensorView):
        return {
            "type": "SensorView", "timestamp": msg.timestamp, "ego_id": msg.ego_id,
            "lanes_ref": msg.lanes_ref,
            "objects": [_obj_dict(o) for o in msg.objects],
            "signals": [[s.kind, s.lane_id, s.s, s.value] for s in msg.signals],
        }
    if isinstance(msg, TrafficCommand):
        return {"type": "TrafficCommand", "timestamp": msg.timestamp,
                "actions": [_action_dict(a) for a in msg.actions]}
    if isinstance(msg, MotionRequest):
        return {"type": "MotionRequest", "a_des": msg.a_des, "kappa_des": msg.kappa_des}
    if isinstance(msg, TrafficUpdate):
        return {"type": "TrafficUpdate", "timestamp": msg.timestamp,
                "state": _obj_dict(msg.state)}
    raise TypeError(f"not a message: {type(msg).__name__}")


_dumps = json.JSONEncoder(separators=(",", ":")).encode


def encode_object(obj: MovingObjectState) -> str:
    """Wire text of one object; reusable across many views of one tick."""
    return _dumps(_obj_dict(obj))


def encode_signals(signals) -> str:
    return _dumps([[s.kind, s.lane_id, s.s, s.value] for s in signals])


def encode_sensor_view_parts(timestamp: float, ego_id: str, lanes_ref: str,
                             object_texts, signals_text: str) -> bytes:
    """Assemble a SensorView from pre-encoded parts.

    Produces exactly the bytes ``encode`` gives for the equivalent message.
    """
    head = _dumps({"type": "SensorView", "timestamp": timestamp, "ego_id": ego_id,
                   "lanes_ref": lanes_ref})
    return (head[:-1] + ',"objects":[' + ",".join(object_texts) + '],"signals":'
            + signals_text + "}").encode()


def encode(msg: Message) -> bytes:
    if isinstance(msg, SensorView):
        return encode_sensor_view_parts(msg.timestamp, msg.ego_id, msg.lanes_ref,
                                        [encode_object(o) for o in msg.objects],
                                        encode_signals(msg.signals))
    return _dumps(to_dict(msg)).encode()


def _pose(d: dict) -> Pose2:
    return Pose2(float(d["x"]), float(d["y"]), float(d["yaw"]))


def _obj(d: dict) -> MovingObjectState:
    lane = d.get("lane_id")
    return MovingObjectState(
        id=str(d["id"]), pose=_pose(d["pose"]), velocity=float(d["velocity"]),
        acceleration=float(d["acceleration"]), length=float(d["length"]),
        width=float(d["width"]), lane_id=None if lane is None else str(lane),
        s=float(d["s"]),
    )


def _action(d: dict) -> Action:
    kind = d["action"]
    if kind == "AcquireGlobalPosition":
        return AcquireGlobalPosition(float(d["x"]), float(d["y"]))
    if kind == "SpeedAction":
        return SpeedAction(float(d["v_target"]))
    raise DecodeError("malformed", f"unknown action {kind!r}")


def from_dict(d: Any) -> Message:
    if not isinstance(d, dict):
        raise DecodeError("malformed", "top level is not an object")
    kind = d.get("type")
    try:
        if kind == "SensorView":
            return SensorView(
                timestamp=float(d["timestamp"]), ego_id=str(d["ego_id"]),
                objects=tuple(_obj(o) for o in d["objects"]),
                lanes_ref=str(d.get("lanes_ref", "")),
                signals=tuple(Signal(str(k), str(lane), float(s), float(v))
                              for k, lane, s, v in d.get("signals", ())),
            )
        if kind == "TrafficCommand":
            return TrafficCommand(float(d["timestamp"]),
                                  tuple(_action(a) for a in d["actions"]))
        if kind == "MotionRequest":
            return MotionRequest(float(d["a_des"]), float(d["kappa_des"]))
        if kind == "TrafficUpdate":
            return TrafficUpdate(float(d["timestamp"]), _obj(d["state"]))
    except DecodeError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise DecodeError("malformed", f"{kind}: {exc!r}") from None
    raise DecodeError("malformed", f"unknown message type {kind!r}")


def decode(data: bytes) -> Message:
    if not data:
        raise DecodeError("truncated", "empty input")
    try:
        text = data.decode() if isinstance(data, (bytes, bytearray)) else str(data)
        d = json.loads(text)
    except UnicodeDecodeError as exc:
        raise DecodeError("malformed", str(exc)) from None
    except json.JSONDecodeError as exc:
        # errors at the very end of the document mean the input was cut short
        if exc.pos >= len(exc.doc.rstrip()):
            raise DecodeError("truncated", exc.msg) from None
        raise DecodeError("malformed", exc.msg) from None
    return from_dict(d)
