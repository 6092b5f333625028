"""Sensing layer: turns SensorView and TrafficCommand into the driver input.

The adapter owns the agent's goals (route, commanded speed), its position on
the route, the lane-change execution state and stop-line releases. Per step it
assembles a fresh ``DriverInput``: virtual horizon, lead vehicle, lane-change
plan and the lateral reference the steering law tracks.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from agentsim.lanemap import (
    DEFAULT_LANE_CHANGE_PENALTY, Lane, MapModel, NoRoute, OffRoad, Route, shortest_route,
)
from agentsim.messages import (
    SIGN_SPEED_LIMIT, SIGN_STOP_LINE, AcquireGlobalPosition, MovingObjectState, SensorView,
    Signal, SpeedAction, TrafficCommand,
)

PREVIEW_SPACING = 2.0
MIN_PREVIEW = 20.0
DEFAULT_ROUTE_LENGTH = 3000.0


@dataclass(frozen=True)
class AdapterParameters:
    g_front: float = 10.0
    g_rear: float = 15.0
    lc_end_margin: float = 10.0
    lane_change_penalty: float = DEFAULT_LANE_CHANGE_PENALTY
    lc_settle_tol: float = 0.1
    stop_release_speed: float = 0.3
    stop_release_dist: float = 6.0
    claim_zone: float = 9.0
    conflict_clearance: float = 2.0
    departing_accel: float = 0.1
    accept_gap: float = 7.0
    priority_dist: float = 15.0


# -- route geometry -----------------------------------------------------------

def split_groups(map_model: MapModel, route: Route) -> list[list[str]]:
    """Split a route's lane sequence at successor edges.

    Each group is a run of lanes joined by lane changes; its last lane is the
    one the route leaves through.
    """
    groups = [[route.lane_ids[0]]]
    for kind, lane_id in zip(route.edges(map_model), route.lane_ids[1:]):
        if kind == "successor":
            groups.append([lane_id])
        else:
            groups[-1].append(lane_id)
    return groups


def _lateral_offset(src: Lane, ref: Lane) -> float:
    s = 0.5 * min(src.length, ref.length)
    x, y, _ = src.position_at(s)
    return ref.project(x, y)[1]


class RoutePath:
    """Route-level arc-length coordinate and reference geometry.

    Route-s is lane-s plus a per-group offset, so every lane in a group of
    parallel lanes shares one coordinate. The reference geometry follows the
    exit lane of each group.
    """

    def __init__(self, map_model: MapModel, route: Route, signals=(), end_is_stop: bool = True):
        self.map = map_model
        self.route = route
        self.groups = split_groups(map_model, route)
        self.end_is_stop = end_is_stop
        self.group_offset: list[float] = []
        self.lane_offsets: list[dict[str, float]] = []
        self.lane_group: dict[str, int] = {}
        xs, ys, hs, ks, ss = [], [], [], [], []
        off = 0.0
        last = len(self.groups) - 1
        for g, group in enumerate(self.groups):
            exit_lane = map_model.lanes[group[-1]]
            self.group_offset.append(off)
            offs = {group[-1]: 0.0}
            for lid in group[:-1]:
                offs[lid] = _lateral_offset(map_model.lanes[lid], exit_lane)
            self.lane_offsets.append(offs)
            for lid in group:
                self.lane_group.setdefault(lid, g)
            heading = np.concatenate((exit_lane.seg_heading, exit_lane.seg_heading[-1:]))
            xs.append(exit_lane.points[:, 0])
            ys.append(exit_lane.points[:, 1])
            hs.append(heading)
            ks.append(exit_lane.vertex_kappa)
            ss.append(off + exit_lane.s)
            if g < last:
                off += exit_lane.length
        self.end = off + route.goal[1]
        self.s = np.concatenate(ss)
        self.x = np.concatenate(xs)
        self.y = np.concatenate(ys)
        self.heading = np.unwrap(np.concatenate(hs))
        self.kappa = np.concatenate(ks)
        self._cols = None
        self._build_events(signals)

    def _build_events(self, signals):
        limits: dict[float, float] = {}
        stops: dict[float, tuple[str, float]] = {}
        for g, group in enumerate(self.groups):
            lane = self.map.lanes[group[-1]]
            if lane.speed_limit is not None:
                limits.setdefault(self.group_offset[g], lane.speed_limit)
        for sig in signals:
            g = self.lane_group.get(sig.lane_id)
            if g is None:
                continue
            rs = self.group_offset[g] + sig.s
            if sig.kind == SIGN_SPEED_LIMIT:
                limits[rs] = sig.value
            elif sig.kind == SIGN_STOP_LINE:
                stops.setdefault(rs, (sig.lane_id, sig.s))
        keys = sorted(limits)
        self.limit_s = np.array(keys, dtype=float)
        self.limit_v = np.array([limits[k] for k in keys], dtype=float)
        self.stop_s = np.array(sorted(stops), dtype=float)
        self.stop_keys = [stops[k] for k in sorted(stops)]

    def route_s(self, lane_id: str, s: float, group_hint: int = 0) -> Optional[float]:
        for g in range(group_hint, len(self.groups)):
            if lane_id in self.lane_offsets[g]:
                return self.group_offset[g] + s
        return None

    def pose_at(self, rs: float) -> tuple[float, float, float]:
        """Reference (x, y, heading) at route-s; extrapolates past the end."""
        if self._cols is None:
            self._cols = (self.s.tolist(), self.x.tolist(), self.y.tolist(), self.heading.tolist())
        s, x, y, h = self._cols
        if rs >= s[-1]:
            u = rs - s[-1]
            return x[-1] + u * math.cos(h[-1]), y[-1] + u * math.sin(h[-1]), h[-1]
        if rs <= s[0]:
            return x[0], y[0], h[0]
        i = bisect.bisect_right(s, rs) - 1
        w = (rs - s[i]) / (s[i + 1] - s[i])
        return (x[i] + w * (x[i + 1] - x[i]), y[i] + w * (y[i + 1] - y[i]),
                h[i] + w * (h[i + 1] - h[i]))

    def limit_at(self, rs) -> np.ndarray:
        """Latest speed limit at or before each route-s (NaN before any)."""
        rs = np.atleast_1d(np.asarray(rs, dtype=float))
        if not len(self.limit_v):
            return np.full(rs.shape, np.nan)
        idx = np.searchsorted(self.limit_s, rs, side="right") - 1
        return np.where(idx >= 0, self.limit_v[np.clip(idx, 0, None)], np.nan)


# -- driver-interface types ---------------------------------------------------

@dataclass(frozen=True)
class HorizonPoint:
    ds: float
    kappa: float
    speed_limit: Optional[float]
    stop: bool


@dataclass(frozen=True, eq=False)
class VirtualHorizon:
    """Arc-length preview along the route, stored column-wise.

    ``speed_limit`` holds NaN where no limit applies. ``stop_net`` is the
    net distance the vehicle's front may still travel for stop-flagged points.
    """

    ds: np.ndarray
    kappa: np.ndarray
    speed_limit: np.ndarray
    stop: np.ndarray
    stop_net: np.ndarray
    route: Route
    ego_s_on_route: float
    path: RoutePath
    ds_max: float

    @property
    def points(self) -> list[HorizonPoint]:
        return [HorizonPoint(float(d), float(k), None if math.isnan(v) else float(v), bool(st))
                for d, k, v, st in zip(self.ds, self.kappa, self.speed_limit, self.stop)]

    @property
    def end(self) -> float:
        return float(self.ds[-1])

    def __eq__(self, other):
        if not isinstance(other, VirtualHorizon):
            return NotImplemented
        return (self.route == other.route and self.ego_s_on_route == other.ego_s_on_route
                and all(np.array_equal(a, b, equal_nan=True) for a, b in (
                    (self.ds, other.ds), (self.kappa, other.kappa),
                    (self.speed_limit, other.speed_limit), (self.stop, other.stop),
                    (self.stop_net, other.stop_net))))


@dataclass(frozen=True)
class LeadInfo:
    present: bool = False
    gap: float = math.inf
    v_pre: float = 0.0
    id: Optional[str] = None


@dataclass(frozen=True)
class LaneChangePlan:
    pending: bool = False
    direction: Optional[str] = None
    s_window: Optional[tuple[float, float]] = None
    target_lane: Optional[str] = None
    released: bool = False


@dataclass(frozen=True)
class ActiveLaneChange:
    t_start: float
    offset_from: float
    offset_to: float
    source_lane: str
    target_lane: str
    direction: str


@dataclass(frozen=True)
class LateralReference:
    """Target lateral offset from the route reference line.

    Inside the current lane group the offset is the reference lane's offset
    or, during a lane change, the fading profile. Later groups use the offset
    of the lane the route enters them on.
    """

    group_end: float
    base: float
    lc: Optional[ActiveLaneChange] = None
    lc_duration: float = 4.0
    future: tuple[tuple[float, float], ...] = ()
    bias: float = 0.0

    def offset(self, rs: float, t: float) -> float:
        if rs >= self.group_end and self.future:
            val = self.future[0][1]
            for start, o in self.future:
                if rs >= start:
                    val = o
            return val + self.bias
        if self.lc is None:
            return self.base + self.bias
        return lane_change_profile(self.lc.offset_from, self.lc.offset_to,
                                   t - self.lc.t_start, self.lc_duration) + self.bias


def smoothstep(u: float) -> float:
    u = min(max(u, 0.0), 1.0)
    return u * u * (3.0 - 2.0 * u)


def lane_change_profile(o_from: float, o_to: float, t_since_start: float, duration: float) -> float:
    u = t_since_start / duration if duration > 0 else 1.0
    return o_from + (o_to - o_from) * smoothstep(u)


@dataclass(frozen=True, eq=False)
class DriverInput:
    horizon: VirtualHorizon
    lead: LeadInfo
    lane_change: LaneChangePlan
    v_command: Optional[float]
    ego: MovingObjectState
    timestamp: float = 0.0
    lateral: LateralReference = field(default_factory=lambda: LateralReference(math.inf, 0.0))
    lane_d: float = 0.0
    lc_progress: Optional[float] = None

    def to_dict(self) -> dict:
        h = self.horizon
        return {
            "timestamp": self.timestamp,
            "ego": {"id": self.ego.id, "v": self.ego.velocity, "lane_id": self.ego.lane_id, "s": self.ego.s},
            "route": list(h.route.lane_ids),
            "ego_s_on_route": h.ego_s_on_route,
            "horizon": [[p.ds, p.kappa, p.speed_limit, p.stop] for p in h.points],
            "lead": {"present": self.lead.present, "gap": self.lead.gap if self.lead.present else None,
                     "v_pre": self.lead.v_pre, "id": self.lead.id},
            "lane_change": {"pending": self.lane_change.pending, "direction": self.lane_change.direction,
                            "s_window": self.lane_change.s_window, "released": self.lane_change.released},
            "v_command": self.v_command,
            "lane_d": self.lane_d,
        }


# -- pure operations ----------------------------------------------------------

def build_horizon(path: RoutePath, ego_rs: float, v: float, T_max: float,
                  ego_length: float = 4.5, released: frozenset = frozenset()) -> VirtualHorizon:
    """Preview points every 2 m plus sign, stop-line and route-end points.

    The horizon reaches ``max(v * T_max, 20)`` meters or the route end,
    whichever comes first.
    """
    ds_max = max(v * T_max, MIN_PREVIEW)
    remaining = path.end - ego_rs
    end = min(ds_max, max(remaining, 0.0))
    grid = np.arange(0.0, end, PREVIEW_SPACING)
    ev = [end]
    if len(path.limit_s):
        lim_ds = path.limit_s - ego_rs
        ev.extend(lim_ds[(lim_ds > 0) & (lim_ds <= end)].tolist())
    stop_ds = []
    for st, key in zip(path.stop_s.tolist(), path.stop_keys):
        d = st - ego_rs
        if 0 <= d <= end and key not in released:
            stop_ds.append(d)
    ev.extend(stop_ds)
    if len(ev) == 1 and (not len(grid) or grid[-1] < end):
        ds = np.append(grid, end)
    else:
        ds = np.unique(np.concatenate([grid, ev]))
    rs = ego_rs + ds
    kappa = np.interp(rs, path.s, path.kappa)
    limit = path.limit_at(rs)
    stop = np.isin(ds, stop_ds) if stop_ds else np.zeros(len(ds), dtype=bool)
    net = np.where(stop, ds - 0.5 * ego_length, np.inf)
    if path.end_is_stop and remaining <= ds_max:
        stop[-1] = True
        net[-1] = min(net[-1], ds[-1])
    return VirtualHorizon(ds, kappa, limit, stop, net, path.route, ego_rs, path, ds_max)


def find_lead(view: SensorView, horizon: VirtualHorizon, map_model: MapModel,
              ego: MovingObjectState, lateral: Optional[LateralReference] = None,
              group_hint: int = 0) -> LeadInfo:
    """Nearest object on the route ahead within the preview distance.

    Objects count when their lateral position is within half a lane width of
    the ego's lateral reference at that point.
    """
    path = horizon.path
    best: Optional[tuple[float, str, MovingObjectState]] = None
    for obj in view.objects:
        if obj.id == ego.id or obj.lane_id is None:
            continue
        if obj.lane_id not in path.lane_group:
            continue
        rs = path.route_s(obj.lane_id, obj.s, max(group_hint, 0))
        if rs is None:
            continue
        dist = rs - horizon.ego_s_on_route
        if dist <= 0 or dist > horizon.ds_max:
            continue
        lane = map_model.lanes[obj.lane_id]
        d_obj = lane.project(obj.pose.x, obj.pose.y, s_hint=obj.s)[1]
        g = next(k for k in range(max(group_hint, 0), len(path.groups))
                 if obj.lane_id in path.lane_offsets[k])
        lat = path.lane_offsets[g][obj.lane_id] + d_obj
        target = lateral.offset(rs, view.timestamp) if lateral is not None else 0.0
        if abs(lat - target) >= 0.5 * lane.width:
            continue
        key = (dist, obj.id)
        if best is None or key < best[:2]:
            best = (dist, obj.id, obj)
    if best is None:
        return LeadInfo()
    dist, oid, obj = best
    gap = dist - 0.5 * (obj.length + ego.length)
    return LeadInfo(True, max(gap, 1e-3), obj.velocity, oid)


def lane_change_window(lane: Lane, s_ego: float, end_margin: float) -> Optional[tuple[float, float]]:
    """First interval of ``[s_ego, end]`` free of crossing zones, with margin.

    The margin is kept before each zone and before the lane end.
    """
    free = []
    cur = s_ego
    for a, b in lane.crossing_zones:
        if b <= cur:
            continue
        if a > cur:
            free.append((cur, a))
        cur = max(cur, b)
    if cur < lane.length:
        free.append((cur, lane.length))
    for a, b in free:
        if b - end_margin > a:
            return (a, b - end_margin)
    return None


def lane_change_gaps(view: SensorView, target: Lane, ego: MovingObjectState, s_ego: float,
                     offset_s: float = 0.0) -> tuple[float, float]:
    """Free (front, rear) bumper gaps on the target lane at the ego position."""
    front = rear = math.inf
    for obj in view.objects:
        if obj.id == ego.id or obj.lane_id != target.id:
            continue
        ds = obj.s + offset_s - s_ego
        half = 0.5 * (obj.length + ego.length)
        if ds >= 0:
            front = min(front, ds - half)
        else:
            rear = min(rear, -ds - half)
    return front, rear


def plan_lane_change(map_model: MapModel, path: RoutePath, group: int, ref_lane: str, s_ego: float,
                     view: SensorView, ego: MovingObjectState,
                     params: AdapterParameters = AdapterParameters()) -> LaneChangePlan:
    lanes = path.groups[group]
    idx = lanes.index(ref_lane) if ref_lane in lanes else len(lanes) - 1
    if idx >= len(lanes) - 1:
        return LaneChangePlan()
    cur = map_model.lanes[ref_lane]
    target_id = lanes[idx + 1]
    direction = "left" if cur.left_neighbor == target_id else "right"
    window = lane_change_window(cur, s_ego, params.lc_end_margin)
    released = False
    if window is not None and window[0] <= s_ego <= window[1]:
        front, rear = lane_change_gaps(view, map_model.lanes[target_id], ego, s_ego)
        released = front > params.g_front and rear > params.g_rear
    return LaneChangePlan(True, direction, window, target_id, released)


# -- stateful adapter ---------------------------------------------------------

class AgentAdapter:
    """Per-agent sensing state: goals, route position, lane change, yielding."""

    def __init__(self, map_model: MapModel, params: AdapterParameters = AdapterParameters(),
                 T_max: float = 10.0, lc_duration: float = 4.0, lateral_bias: float = 0.0):
        self.map = map_model
        self.params = params
        self.T_max = T_max
        self.lc_duration = lc_duration
        self.lateral_bias = lateral_bias
        self.goal: Optional[tuple[str, float]] = None
        self.goal_xy: Optional[tuple[float, float]] = None
        self.v_command: Optional[float] = None
        self.path: Optional[RoutePath] = None
        self.group = 0
        self.ref_lane: Optional[str] = None
        self.s = 0.0
        self.d = 0.0
        self.lc: Optional[ActiveLaneChange] = None
        self.lc_switched = False
        self.lc_settling = False
        self.released: set[tuple[str, float]] = set()
        self.arrivals: dict[str, float] = {}
        self.yield_to: Optional[str] = None
        self.diagnostics: list[str] = []
        self.events: list[tuple[str, str]] = []
        self._signals: tuple[Signal, ...] = tuple(map_model.signals)
        self._xy: Optional[tuple[float, float]] = None
        self._loc_lane: Optional[str] = None
        self._needs_route = True

    # goals

    def process_command(self, cmd: Optional[TrafficCommand]) -> None:
        """Apply a command's actions; absent commands keep previous goals."""
        if cmd is None:
            return
        for action in cmd.actions:
            if isinstance(action, SpeedAction):
                if action.v_target >= 0 and math.isfinite(action.v_target):
                    self.v_command = action.v_target
                else:
                    self.diagnostics.append(f"rejected SpeedAction({action.v_target})")
            elif isinstance(action, AcquireGlobalPosition):
                try:
                    lane_id, s, _ = self.map.project(action.x, action.y)
                except OffRoad as exc:
                    self.diagnostics.append(f"rejected AcquireGlobalPosition: {exc}")
                    continue
                prev = self.goal
                self.goal = (lane_id, s)
                self.goal_xy = (action.x, action.y)
                if self.ref_lane is not None:
                    if not self._reroute():
                        self.goal = prev
                else:
                    self._needs_route = True

    def _default_route(self, lane_id: str, s: float) -> tuple[Route, bool]:
        ids = [lane_id]
        lane = self.map.lanes[lane_id]
        total = lane.length - s
        seen = {lane_id}
        while lane.successors and total < DEFAULT_ROUTE_LENGTH:
            nxt = sorted(lane.successors)[0]
            if nxt in seen:
                break
            seen.add(nxt)
            ids.append(nxt)
            lane = self.map.lanes[nxt]
            total += lane.length
        dead_end = not lane.successors
        return Route(tuple(ids), total, 0, (lane_id, s), (ids[-1], lane.length), total), dead_end

    def _reroute(self) -> bool:
        start = (self.ref_lane, min(max(self.s, 0.0), self.map.lanes[self.ref_lane].length))
        if self.goal is not None:
            try:
                route = shortest_route(self.map, start, self.goal, self.params.lane_change_penalty)
            except NoRoute as exc:
                self.diagnostics.append(f"no route: {exc}")
                return False
            end_stop = True
        else:
            route, end_stop = self._default_route(*start)
        self.path = RoutePath(self.map, route, self._signals, end_is_stop=end_stop)
        self.group = 0
        self.lc = None
        self.lc_switched = False
        self._needs_route = False
        return True

    # localization

    def localize(self, x: float, y: float) -> tuple[str, float, float]:
        """Track the ego along its reference lane, moving on at lane ends."""
        if (x, y) == self._xy and self._loc_lane == self.ref_lane:
            return self.ref_lane, self.s, self.d
        self._xy = (x, y)
        lane = self.map.lanes[self.ref_lane]
        s, d, _ = lane.project(x, y, s_hint=self.s)
        for _ in range(4):
            if s < lane.length - 1e-6 or not lane.successors:
                break
            nxt = self._next_lane(lane)
            if nxt is None:
                break
            lane = self.map.lanes[nxt]
            self.ref_lane = nxt
            s, d, _ = lane.project(x, y, s_hint=0.0)
        self.s, self.d = s, d
        self._loc_lane = self.ref_lane
        return self.ref_lane, s, d

    def _next_lane(self, lane: Lane) -> Optional[str]:
        path = self.path
        if path is not None and self.group + 1 < len(path.groups) and lane.id == path.groups[self.group][-1]:
            self.group += 1
            return path.groups[self.group][0]
        # left the route: follow the lane graph and plan again
        self._needs_route = True
        return sorted(lane.successors)[0]

    # per-step assembly

    def step(self, view: SensorView, cmd: Optional[TrafficCommand] = None) -> DriverInput:
        self.events = []
        if view.signals:
            self._signals = view.signals
        ego = view.ego()
        t = view.timestamp
        if self.ref_lane is None:
            if ego.lane_id is not None:
                self.ref_lane, self.s = ego.lane_id, ego.s
            else:
                self.ref_lane, self.s, _ = self.map.project(ego.pose.x, ego.pose.y)
        self.localize(ego.pose.x, ego.pose.y)
        self.process_command(cmd)
        path = self.path
        if (self._needs_route or path is None
                or (not path.end_is_stop and path.end - self._route_s() < max(ego.velocity * self.T_max, MIN_PREVIEW) + 50.0)):
            self._reroute()
            path = self.path
        if self.ref_lane not in path.groups[self.group]:
            self._reroute()
            path = self.path

        self._advance_lane_change(t)
        plan = plan_lane_change(self.map, path, self.group, self.ref_lane, self.s, view, ego, self.params)
        if plan.pending and plan.released and self.lc is None:
            offs = path.lane_offsets[self.group]
            self.lc = ActiveLaneChange(t, offs[self.ref_lane], offs[plan.target_lane],
                                       self.ref_lane, plan.target_lane, plan.direction)
            self.lc_switched = False
            self.events.append(("lane_change_start", f"{self.ref_lane}->{plan.target_lane}"))

        ego_rs = self._route_s()
        lateral = self._lateral_reference()
        self._update_releases(view, ego, ego_rs)
        horizon = build_horizon(path, ego_rs, ego.velocity, self.T_max, ego.length,
                                frozenset(self.released))
        lead = find_lead(view, horizon, self.map, ego, lateral, self.group)
        progress = None
        if self.lc is not None:
            progress = min(max((t - self.lc.t_start) / self.lc_duration, 0.0), 1.0)
        return DriverInput(horizon, lead, plan, self.v_command, ego, t, lateral, self.d, progress)

    def _route_s(self) -> float:
        return self.path.group_offset[self.group] + self.s

    def _lateral_reference(self) -> LateralReference:
        path = self.path
        g = self.group
        end = path.group_offset[g + 1] if g + 1 < len(path.groups) else math.inf
        future = tuple((path.group_offset[k], path.lane_offsets[k][path.groups[k][0]])
                       for k in range(g + 1, len(path.groups)))
        base = path.lane_offsets[g].get(self.ref_lane, 0.0)
        return LateralReference(end, base, self.lc, self.lc_duration, future, self.lateral_bias)

    def _advance_lane_change(self, t: float) -> None:
        lc = self.lc
        if lc is not None:
            u = (t - lc.t_start) / self.lc_duration
            if u >= 0.5 and not self.lc_switched:
                self.ref_lane = lc.target_lane
                lane = self.map.lanes[lc.target_lane]
                self.s, self.d, _ = lane.project(*self._xy, s_hint=self.s)
                self.lc_switched = True
                self.lc_settling = True
            if u >= 1.0:
                self.lc = None
                self.lc_switched = False
        if self.lc_settling and abs(self.d - self.lateral_bias) <= self.params.lc_settle_tol:
            self.lc_settling = False
            self.events.append(("lane_change_end", self.ref_lane))

    # stop-line yielding

    def _update_releases(self, view: SensorView, ego: MovingObjectState, ego_rs: float) -> None:
        path = self.path
        if not len(path.stop_s):
            return
        p = self.params
        self._track_arrivals(view)
        ahead = path.stop_s - ego_rs
        for ds, key in zip(ahead, path.stop_keys):
            if key in self.released or ds < 0:
                continue
            if ego.velocity > p.stop_release_speed or ds - 0.5 * ego.length > p.stop_release_dist:
                break
            if self._clear_to_go(view, ego, key):
                self.released.add(key)
                self.events.append(("stop_released", f"{key[0]}@{key[1]:g}"))
            break

    def _stop_lines(self) -> dict[str, float]:
        return {sig.lane_id: sig.s for sig in self._signals if sig.kind == SIGN_STOP_LINE}

    def _track_arrivals(self, view: SensorView) -> None:
        """Remember when each vehicle came to rest in a stop-line zone.

        Every agent sees the same ground truth, so all of them agree on the
        resulting first-come order.
        """
        lines = self._stop_lines()
        zone = self.params.claim_zone
        for obj in view.objects:
            line = lines.get(obj.lane_id)
            if line is None or not line - zone <= obj.s <= line:
                self.arrivals.pop(obj.id, None)
            elif obj.velocity <= self.params.stop_release_speed:
                self.arrivals.setdefault(obj.id, view.timestamp)

    def _clear_to_go(self, view: SensorView, ego: MovingObjectState, key: tuple[str, float]) -> bool:
        self.yield_to = self._yield_reason(view, ego, key)
        return self.yield_to is None

    def _yield_reason(self, view: SensorView, ego: MovingObjectState,
                      key: tuple[str, float]) -> Optional[str]:
        """Why the stop line ``key`` may not be passed now, or None if it may.

        Blocking: vehicles on a conflicting lane that have not cleared the
        shared point; on approaches whose movements can meet ours, vehicles
        without a stop line that arrive within ``accept_gap`` seconds or
        ``priority_dist`` meters, vehicles departing a stop line, and
        vehicles that came to rest at a stop line first (ties broken by id).
        """
        path = self.path
        g = path.lane_group[key[0]]
        if g + 1 >= len(path.groups):
            return None
        nxt = path.groups[g + 1][0]
        extent = self.map.conflict_extent[nxt]
        p = self.params
        lines = self._stop_lines()
        mine = (self.arrivals.get(ego.id, view.timestamp), ego.id)
        for obj in view.objects:
            if obj.id == ego.id or obj.lane_id is None:
                continue
            reach = extent.get(obj.lane_id)
            if reach is not None:
                # blocks until its rear has cleared the last shared point
                if obj.s - 0.5 * obj.length <= reach + p.conflict_clearance:
                    return f"{obj.id} crossing on {obj.lane_id}"
                continue
            lane = self.map.lanes.get(obj.lane_id)
            if lane is None or obj.lane_id == key[0]:
                continue
            if not any(c in extent for c in lane.successors):
                continue  # none of its movements meets ours
            line = lines.get(obj.lane_id)
            if line is None:
                # priority approach: demand an arrival gap
                to_go = lane.length - obj.s - 0.5 * obj.length
                if to_go <= p.priority_dist or to_go < p.accept_gap * obj.velocity:
                    return f"{obj.id} approaching with priority"
                continue
            if not line - p.claim_zone <= obj.s <= line:
                continue
            if obj.acceleration > p.departing_accel:
                return f"{obj.id} departing"
            arrived = self.arrivals.get(obj.id)
            if arrived is not None and (arrived, obj.id) < mine:
                return f"{obj.id} arrived first"
        return None
