"""Scenario runner: ground truth, sensor views, stepping, collisions, logs."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from agentsim import roadgen
from agentsim.dynamics import DynamicsParameters, PIDGains, VehicleState, direct_pass_step
from agentsim.host import (
    PORT_MOTION_REQUEST, PORT_SENSOR_VIEW, PORT_TRAFFIC_COMMAND, PORT_TRAFFIC_UPDATE,
    ComponentHost, HostError, StepRecord, UnknownName,
)
from agentsim.lanemap import MapError, MapModel, load_map, map_from_dict
from agentsim.messages import (
    AcquireGlobalPosition, MovingObjectState, Pose2, SpeedAction, TrafficCommand, decode,
    encode, encode_object, encode_sensor_view_parts, encode_signals,
)

DEFAULT_DT = 0.01
GOAL_TOLERANCE = 5.0
LOG_CHANNELS = ("t", "x", "y", "yaw", "v", "a", "thw", "d", "kappa_des", "a_des",
                "v_T", "v_T_pred", "lead_gap", "s", "route_s", "lc_progress", "yaw_offset")


class ScenarioError(ValueError):
    def __init__(self, message: str, context: str = ""):
        super().__init__(f"{context}: {message}" if context else message)
        self.context = context


# -- scenario -----------------------------------------------------------------

@dataclass(frozen=True)
class TimedCommand:
    t: float
    command: TrafficCommand


@dataclass
class AgentSpec:
    id: str
    lane_id: str
    s: float
    d: float = 0.0
    v: float = 0.0
    length: float = 4.5
    width: float = 1.8
    parameters: dict = field(default_factory=dict)
    commands: list = field(default_factory=list)
    despawn_on_goal: bool = False
    goal_tolerance: float = GOAL_TOLERANCE


@dataclass
class Scenario:
    name: str
    map: MapModel
    duration: float
    agents: list
    dt: float = DEFAULT_DT
    view_range: Optional[float] = None
    criteria: list = field(default_factory=list)
    description: str = ""
    source: Optional[str] = None
    raw: Optional[dict] = None

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.dt))


_GENERATORS = {
    "test_road": roadgen.generate_test_road,
    "straight": roadgen.generate_straight_road,
    "intersection": roadgen.generate_intersection,
}


def packaged_path(*parts: str) -> Path:
    return Path(str(resources.files("agentsim").joinpath("data", *parts)))


def resolve_map(spec: Any, base_dir: Optional[Path] = None) -> MapModel:
    """Map from a file path (scenario-relative, then packaged) or a generator spec."""
    if isinstance(spec, dict):
        if "lanes" in spec:
            return map_from_dict(spec, "<inline map>")
        args = dict(spec)
        gen = args.pop("generator", None)
        if gen not in _GENERATORS:
            raise ScenarioError(f"unknown map generator {gen!r}", "map")
        for key in ("signs", "crossing_zones"):
            if key in args:
                args[key] = [tuple(x) for x in args[key]]
        try:
            return _GENERATORS[gen](**args)
        except (TypeError, ValueError) as exc:
            raise ScenarioError(f"generator {gen}: {exc}", "map") from None
    if isinstance(spec, str):
        candidates = [Path(spec)]
        if base_dir is not None:
            candidates.insert(0, base_dir / spec)
        candidates.append(packaged_path(spec))
        for c in candidates:
            if c.is_file():
                return load_map(c)
        raise ScenarioError(f"map file {spec!r} not found", "map")
    raise ScenarioError("field 'map' must be a path or an object", "map")


def _num(d: dict, key: str, ctx: str, default=None) -> float:
    if key not in d:
        if default is None:
            raise ScenarioError(f"missing field {key!r}", ctx)
        return default
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ScenarioError(f"field {key!r} must be a finite number, got {v!r}", ctx)
    return float(v)


def _action(a: dict, map_model: MapModel, ctx: str):
    kind = a.get("action")
    if kind == "SpeedAction":
        v = _num(a, "v_target", ctx)
        if v < 0:
            raise ScenarioError("v_target must be >= 0", ctx)
        return SpeedAction(v)
    if kind == "AcquireGlobalPosition":
        if "lane_id" in a:
            lane = map_model.lanes.get(a["lane_id"])
            if lane is None:
                raise ScenarioError(f"unknown lane {a['lane_id']!r}", ctx)
            x, y, _ = lane.position_at(_num(a, "s", ctx))
            return AcquireGlobalPosition(x, y)
        return AcquireGlobalPosition(_num(a, "x", ctx), _num(a, "y", ctx))
    raise ScenarioError(f"unknown action {kind!r}", ctx)


def scenario_from_dict(d: dict, base_dir: Optional[Path] = None, source: str = "<scenario>",
                       known_parameters: Optional[set] = None) -> Scenario:
    if not isinstance(d, dict):
        raise ScenarioError("top level must be an object", source)
    try:
        map_model = resolve_map(d.get("map"), base_dir)
    except MapError as exc:
        raise ScenarioError(str(exc), f"{source}: map") from None
    duration = _num(d, "duration", source)
    dt = _num(d, "dt", source, DEFAULT_DT)
    if duration <= 0:
        raise ScenarioError("duration must be positive", source)
    if dt <= 0:
        raise ScenarioError("dt must be positive", source)
    raw_agents = d.get("agents")
    if not isinstance(raw_agents, list) or not raw_agents:
        raise ScenarioError("'agents' must be a non-empty list", source)
    agents = []
    seen = set()
    for i, a in enumerate(raw_agents):
        ctx = f"{source}: agents[{i}]"
        if not isinstance(a, dict) or "id" not in a:
            raise ScenarioError("agent entry needs an 'id'", ctx)
        aid = str(a["id"])
        ctx = f"{source}: agents[{i}] (id={aid})"
        if aid in seen:
            raise ScenarioError(f"duplicate agent id {aid!r}", ctx)
        seen.add(aid)
        lane_id = a.get("lane_id")
        if lane_id not in map_model.lanes:
            raise ScenarioError(f"initial lane {lane_id!r} not in map", ctx)
        lane = map_model.lanes[lane_id]
        s = _num(a, "s", ctx)
        if not 0.0 <= s <= lane.length:
            raise ScenarioError(f"initial s={s} outside lane {lane_id} (length {lane.length:.1f})", ctx)
        dd = _num(a, "d", ctx, 0.0)
        if abs(dd) > lane.width:
            raise ScenarioError(f"initial lateral offset {dd} is off the lane", ctx)
        params = dict(a.get("parameters", {}))
        if known_parameters is not None:
            unknown = sorted(set(params) - known_parameters)
            if unknown:
                raise ScenarioError(f"unknown parameter(s) {unknown}", ctx)
        cmds = []
        for j, c in enumerate(a.get("commands", [])):
            cctx = f"{ctx}.commands[{j}]"
            t = _num(c, "t", cctx)
            if t < 0:
                raise ScenarioError("trigger time must be >= 0", cctx)
            actions = tuple(_action(x, map_model, cctx) for x in c.get("actions", []))
            if not actions:
                raise ScenarioError("command without actions", cctx)
            cmds.append(TimedCommand(t, TrafficCommand(t, actions)))
        cmds.sort(key=lambda c: c.t)
        v = _num(a, "v", ctx, 0.0)
        if v < 0:
            raise ScenarioError("initial speed must be >= 0", ctx)
        agents.append(AgentSpec(
            aid, lane_id, s, dd, v, _num(a, "length", ctx, 4.5), _num(a, "width", ctx, 1.8),
            params, cmds, bool(a.get("despawn_on_goal", False)),
            _num(a, "goal_tolerance", ctx, GOAL_TOLERANCE)))
    vr = d.get("view_range")
    return Scenario(
        name=str(d.get("name", Path(source).stem)), map=map_model, duration=duration,
        agents=agents, dt=dt, view_range=None if vr is None else float(vr),
        criteria=list(d.get("criteria", [])), description=str(d.get("description", "")),
        source=source, raw=d)


def load_scenario(path, known_parameters: Optional[set] = None) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario: {exc.strerror}", str(path)) from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(exc.msg, f"{path}:{exc.lineno}:{exc.colno}") from None
    if known_parameters is None:
        from agentsim.host import load_descriptor
        known_parameters = {p.name for p in load_descriptor().parameters}
    return scenario_from_dict(data, path.parent, str(path), known_parameters)


# -- collisions ---------------------------------------------------------------

def box_corners(x: float, y: float, yaw: float, length: float, width: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = 0.5 * length, 0.5 * width
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    return np.column_stack((x + local[:, 0] * c - local[:, 1] * s, y + local[:, 0] * s + local[:, 1] * c))


def boxes_overlap(a: np.ndarray, b: np.ndarray, tol: float = 1e-9) -> bool:
    """Separating-axis test for two rectangles given by 4 corners each.

    Touching counts as overlap (closed sets).
    """
    for poly in (a, b):
        for i in range(2):
            edge = poly[i + 1] - poly[i]
            axis = np.array([-edge[1], edge[0]])
            n = math.hypot(axis[0], axis[1])
            if n == 0:
                continue
            axis /= n
            pa = a @ axis
            pb = b @ axis
            if pa.max() < pb.min() - tol or pb.max() < pa.min() - tol:
                return False
    return True


def detect_collisions(objects: Sequence[MovingObjectState]) -> list[tuple[str, str]]:
    """Pairs of overlapping vehicle rectangles, ids sorted within and across pairs."""
    n = len(objects)
    if n < 2:
        return []
    xs = [o.pose.x for o in objects]
    ys = [o.pose.y for o in objects]
    rad = [0.5 * math.hypot(o.length, o.width) for o in objects]
    if n <= 16:
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n)
                 if math.hypot(xs[i] - xs[j], ys[i] - ys[j]) <= rad[i] + rad[j] + 1e-9]
    else:
        xy = np.column_stack((xs, ys))
        r = np.asarray(rad)
        diff = xy[:, None, :] - xy[None, :, :]
        near = np.hypot(diff[..., 0], diff[..., 1]) <= r[:, None] + r[None, :] + 1e-9
        ii, jj = np.nonzero(np.triu(near, 1))
        pairs = list(zip(ii.tolist(), jj.tolist()))
    out = []
    corners = {}
    for i, j in pairs:
        for k in (i, j):
            if k not in corners:
                o = objects[k]
                corners[k] = box_corners(o.pose.x, o.pose.y, o.pose.yaw, o.length, o.width)
        if boxes_overlap(corners[i], corners[j]):
            a, b = sorted((objects[i].id, objects[j].id))
            out.append((a, b))
    return sorted(out)


# -- logs ---------------------------------------------------------------------

@dataclass(frozen=True)
class Event:
    t: float
    kind: str
    agents: tuple[str, ...]
    detail: str = ""

    def to_dict(self) -> dict:
        return {"t": self.t, "kind": self.kind, "agents": list(self.agents), "detail": self.detail}


class AgentTrace:
    def __init__(self):
        self.cols: dict[str, list[float]] = {c: [] for c in LOG_CHANNELS}
        self.lane: list[str] = []
        self._arrays: Optional[dict[str, np.ndarray]] = None

    def append(self, row: dict, lane: str) -> None:
        for c in LOG_CHANNELS:
            self.cols[c].append(row[c])
        self.lane.append(lane)
        self._arrays = None

    def __len__(self):
        return len(self.lane)

    def __getitem__(self, channel: str) -> np.ndarray:
        if self._arrays is None:
            self._arrays = {c: np.asarray(v, dtype=float) for c, v in self.cols.items()}
        return self._arrays[channel]

    @property
    def channels(self) -> tuple[str, ...]:
        return LOG_CHANNELS

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(LOG_CHANNELS) + ["lane"])
        cols = [self.cols[c] for c in LOG_CHANNELS]
        for i in range(len(self.lane)):
            w.writerow([repr(col[i]) for col in cols] + [self.lane[i]])
        return buf.getvalue()


@dataclass
class SimulationLog:
    scenario: str
    dt: float
    steps: int
    agents: dict = field(default_factory=dict)
    events: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    aborted: Optional[str] = None

    def events_of(self, kind: str) -> list[Event]:
        return [e for e in self.events if e.kind == kind]

    @property
    def collision_count(self) -> int:
        return len(self.events_of("collision"))

    def events_json(self) -> str:
        return json.dumps({"scenario": self.scenario, "dt": self.dt, "steps": self.steps,
                           "aborted": self.aborted, "events": [e.to_dict() for e in self.events]},
                          indent=1)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for aid in sorted(self.agents):
            h.update(aid.encode())
            h.update(self.agents[aid].to_csv().encode())
        h.update(self.events_json().encode())
        return h.hexdigest()

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for aid in sorted(self.agents):
            p = out / f"{self.scenario}_{aid}.csv"
            p.write_text(self.agents[aid].to_csv())
            paths.append(p)
        p = out / f"{self.scenario}_events.json"
        p.write_text(self.events_json())
        paths.append(p)
        return paths


# -- runner -------------------------------------------------------------------

def initial_state(spec: AgentSpec, map_model: MapModel) -> MovingObjectState:
    lane = map_model.lanes[spec.lane_id]
    x, y, h = lane.position_at(spec.s)
    x -= spec.d * math.sin(h)
    y += spec.d * math.cos(h)
    return MovingObjectState(spec.id, Pose2(x, y, h), spec.v, 0.0, spec.length, spec.width,
                             spec.lane_id, spec.s)


def _track_lane(map_model: MapModel, lane_id: str, s: float, x: float, y: float) -> tuple[str, float]:
    lane = map_model.lanes[lane_id]
    s_new, _, _ = lane.project(x, y, s_hint=s)
    for _ in range(4):
        if s_new < lane.length - 1e-6 or not lane.successors:
            break
        cands = []
        for sid in sorted(lane.successors):
            ss, _, dist = map_model.lanes[sid].project(x, y)
            cands.append((dist, sid, ss))
        _, sid, s_new = min(cands)
        lane = map_model.lanes[sid]
    return lane.id, s_new


def _direct_params(values: dict) -> DynamicsParameters:
    return DynamicsParameters(
        values["wheelbase"], PIDGains(), PIDGains(), values["pedal_to_accel_gain"],
        values["steer_max"], values["a_min"], values["a_max_act"])


class Simulation:
    """One run of a scenario; step by step or to the end with ``run``."""

    def __init__(self, scenario: Scenario, order: Optional[Sequence[str]] = None,
                 parallel: bool = False, record: bool = False, workers: int = 4):
        self.sc = scenario
        self.host = ComponentHost()
        self.host.publish_map(scenario.map)
        self.map = scenario.map
        self.parallel = parallel
        self.workers = workers
        self.record = record
        self.records: dict[str, list[StepRecord]] = {}
        self.specs = {a.id: a for a in scenario.agents}
        ids = sorted(self.specs)
        if order is not None:
            if sorted(order) != ids:
                raise ValueError("order must be a permutation of the agent ids")
            ids = list(order)
        self.order = ids
        self.log = SimulationLog(scenario.name, scenario.dt, scenario.steps)
        self.states: dict[str, MovingObjectState] = {}
        self.instances = {}
        self.direct: dict[str, VehicleState] = {}
        self.goals: dict[str, tuple[float, float]] = {}
        self.reached: set[str] = set()
        self.pending = {a.id: list(a.commands) for a in scenario.agents}
        self.colliding: set[tuple[str, str]] = set()
        self._signals_text = encode_signals(self.map.signals)
        for spec in scenario.agents:
            inst = self.host.instantiate(spec.id)
            inst.set_parameter("length", spec.length)
            inst.set_parameter("width", spec.width)
            for name, value in spec.parameters.items():
                try:
                    inst.set_parameter(name, value)
                except (UnknownName, TypeError, ValueError) as exc:
                    raise ScenarioError(str(exc), f"agent {spec.id}") from None
            inst.initialize()
            self.instances[spec.id] = inst
            st = initial_state(spec, self.map)
            self.states[spec.id] = st
            self.log.agents[spec.id] = AgentTrace()
            if inst.values["direct_pass"]:
                self.direct[spec.id] = VehicleState(st.pose, st.velocity, 0.0)
            if record:
                self.records[spec.id] = []
        self.k = 0

    def _visible(self, ids: list[str]) -> dict[str, list[str]]:
        vr = self.sc.view_range
        if vr is None or len(ids) < 2:
            return {i: ids for i in ids}
        xy = np.array([[self.states[i].pose.x, self.states[i].pose.y] for i in ids])
        diff = xy[:, None, :] - xy[None, :, :]
        near = (diff[..., 0] ** 2 + diff[..., 1] ** 2) <= vr * vr
        return {ids[r]: [ids[c] for c in np.nonzero(near[r])[0]] for r in range(len(ids))}

    def _check_goals(self, t: float) -> None:
        for aid in sorted(self.states):
            goal = self.goals.get(aid)
            if goal is None or aid in self.reached:
                continue
            p = self.states[aid].pose
            spec = self.specs[aid]
            if math.hypot(p.x - goal[0], p.y - goal[1]) <= spec.goal_tolerance:
                self.reached.add(aid)
                self.log.events.append(Event(t, "goal_reached", (aid,)))
                if spec.despawn_on_goal:
                    del self.states[aid]
                    self.instances[aid].terminate()
                    self.log.events.append(Event(t, "despawn", (aid,)))

    def step(self) -> bool:
        """Advance one tick; returns False once the run is over."""
        if self.k >= self.sc.steps or self.log.aborted:
            return False
        dt = self.sc.dt
        t = self.k * dt
        self._check_goals(t)
        ids = sorted(self.states)
        snapshot = [self.states[i] for i in ids]
        touching = detect_collisions(snapshot)
        for pair in touching:
            if pair not in self.colliding:
                self.log.events.append(Event(t, "collision", pair))
        self.colliding = set(touching)

        texts = {o.id: encode_object(o) for o in snapshot}
        visible = self._visible(ids)
        reg = self.host.registry
        for aid in ids:
            sv = encode_sensor_view_parts(t, aid, self.map.version,
                                          [texts[j] for j in visible[aid]], self._signals_text)
            inst = self.instances[aid]
            inst.set_input(PORT_SENSOR_VIEW, reg.put(sv))
            due = []
            q = self.pending[aid]
            while q and q[0].t <= t + 1e-9:
                due.append(q.pop(0))
            cmd_bytes = None
            if due:
                actions = tuple(a for c in due for a in c.command.actions)
                for a in actions:
                    if isinstance(a, AcquireGlobalPosition):
                        self.goals[aid] = (a.x, a.y)
                        self.reached.discard(aid)
                cmd_bytes = encode(TrafficCommand(t, actions))
                inst.set_input(PORT_TRAFFIC_COMMAND, reg.put(cmd_bytes))
            if self.record:
                self.records[aid].append(StepRecord(t, dt, sv, cmd_bytes))

        stepping = [a for a in self.order if a in self.states]
        try:
            if self.parallel:
                with ThreadPoolExecutor(max_workers=self.workers) as pool:
                    list(pool.map(lambda a: self.instances[a].do_step(t, dt), stepping))
            else:
                for aid in stepping:
                    self.instances[aid].do_step(t, dt)
        except HostError as exc:
            self.log.aborted = str(exc)
            self.log.diagnostics.append(f"t={t:.2f}: {exc}")
            return False

        new_states = {}
        for aid in ids:
            inst = self.instances[aid]
            old = self.states[aid]
            if aid in self.direct:
                req = decode(reg.get(inst.get_output(PORT_MOTION_REQUEST)))
                vs = direct_pass_step(self.direct[aid], req, _direct_params(inst.values), dt)
                self.direct[aid] = vs
                lane_id, s = _track_lane(self.map, old.lane_id, old.s, vs.pose.x, vs.pose.y)
                new_states[aid] = MovingObjectState(aid, vs.pose, vs.v, vs.a, old.length, old.width,
                                                    lane_id, s)
            else:
                new_states[aid] = decode(reg.get(inst.get_output(PORT_TRAFFIC_UPDATE))).state
            out = inst.outputs
            p = old.pose
            self.log.agents[aid].append({
                "t": t, "x": p.x, "y": p.y, "yaw": p.yaw, "v": old.velocity, "a": old.acceleration,
                "thw": out["thw"], "d": out["lane_d"], "kappa_des": out["kappa_des"],
                "a_des": out["a_des"], "v_T": out["v_T"], "v_T_pred": out["v_T_pred"],
                "lead_gap": out["lead_gap"], "s": old.s, "route_s": out["route_s"],
                "lc_progress": out["lc_progress"], "yaw_offset": out["yaw_offset"],
            }, old.lane_id or "")
            for te, kind, detail in inst.events:
                self.log.events.append(Event(t, kind, (aid,), detail))
            for dmsg in inst.diagnostics:
                self.log.diagnostics.append(f"t={t:.2f} {aid}: {dmsg}")
        self.states = new_states
        self.k += 1
        return self.k < self.sc.steps

    def run(self) -> SimulationLog:
        while self.step():
            pass
        return self.log


def run(scenario: Scenario, order: Optional[Sequence[str]] = None, parallel: bool = False) -> SimulationLog:
    """Run a scenario to completion and return its log."""
    return Simulation(scenario, order=order, parallel=parallel).run()
