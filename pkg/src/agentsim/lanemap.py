"""Lane-level road network.

A map is a set of directed lanes, each a polyline centerline with width,
optional speed limit, successor links, left/right neighbors and intervals
where lane changes are forbidden (``crossing_zones``). Neighboring lanes are
assumed to share their arc-length parameterization, which is what makes a
lane change a pure lateral move in the routing graph.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from agentsim.messages import SIGN_KINDS, Signal

DEFAULT_LANE_CHANGE_PENALTY = 5.0
DEFAULT_D_MAX = 10.0
CLOTHOID_STEP = 0.5


class MapError(ValueError):
    """Base class for map loading and validation errors."""


class MapFormatError(MapError):
    """The map file could not be parsed; ``context`` locates the problem."""

    def __init__(self, message: str, context: str = ""):
        super().__init__(f"{context}: {message}" if context else message)
        self.context = context


class ReferentialIntegrityError(MapError):
    def __init__(self, message: str, dangling_id: str):
        super().__init__(message)
        self.dangling_id = dangling_id


class NoRoute(LookupError):
    pass


class OffRoad(LookupError):
    pass


class Lane:
    """One directed lane. Treat instances as immutable once built."""

    def __init__(self, id: str, centerline, width: float = 3.5,
                 speed_limit: Optional[float] = None,
                 successors: Iterable[str] = (),
                 left_neighbor: Optional[str] = None,
                 right_neighbor: Optional[str] = None,
                 crossing_zones: Iterable[Sequence[float]] = ()):
        pts = np.asarray(centerline, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise MapError(f"lane {id}: centerline needs at least 2 (x, y) points")
        if not np.all(np.isfinite(pts)):
            raise MapError(f"lane {id}: non-finite centerline coordinates")
        seg = np.diff(pts, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(seg_len <= 0.0):
            i = int(np.argmin(seg_len))
            raise MapError(f"lane {id}: consecutive centerline points {i} and {i + 1} coincide")
        if not width > 0:
            raise MapError(f"lane {id}: width must be positive")
        self.id = str(id)
        self.points = pts
        self.width = float(width)
        self.speed_limit = None if speed_limit is None else float(speed_limit)
        self.successors = tuple(str(s) for s in successors)
        self.left_neighbor = None if left_neighbor is None else str(left_neighbor)
        self.right_neighbor = None if right_neighbor is None else str(right_neighbor)
        self.crossing_zones = tuple(sorted((float(a), float(b)) for a, b in crossing_zones))
        for a, b in self.crossing_zones:
            if not a < b:
                raise MapError(f"lane {id}: crossing zone ({a}, {b}) is empty")

        self.seg = seg
        self.seg_len = seg_len
        self.seg_dir = seg / seg_len[:, None]
        self.s = np.concatenate(([0.0], np.cumsum(seg_len)))
        self.length = float(self.s[-1])
        self.seg_heading = np.arctan2(seg[:, 1], seg[:, 0])
        self.vertex_kappa = _vertex_curvature(pts)
        self._pts = pts.tolist()
        self._dirs = self.seg_dir.tolist()
        self._lens = seg_len.tolist()
        self._s = self.s.tolist()

    def __repr__(self):
        return f"Lane({self.id!r}, length={self.length:.1f})"

    @property
    def neighbors(self) -> tuple[str, ...]:
        return tuple(n for n in (self.left_neighbor, self.right_neighbor) if n is not None)

    def _seg_index(self, s):
        return np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, len(self.seg) - 1)

    def position_at(self, s: float) -> tuple[float, float, float]:
        """(x, y, heading) at arc length ``s``; extrapolates linearly past the ends."""
        i = int(self._seg_index(s))
        u = s - self.s[i]
        x = self.points[i, 0] + u * self.seg_dir[i, 0]
        y = self.points[i, 1] + u * self.seg_dir[i, 1]
        return float(x), float(y), float(self.seg_heading[i])

    def positions_at(self, s: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        s = np.asarray(s, dtype=float)
        i = self._seg_index(s)
        u = s - self.s[i]
        x = self.points[i, 0] + u * self.seg_dir[i, 0]
        y = self.points[i, 1] + u * self.seg_dir[i, 1]
        return x, y, self.seg_heading[i]

    def curvature_at(self, s):
        """Signed curvature (left positive), linear in s between vertices."""
        return np.interp(s, self.s, self.vertex_kappa)

    def project(self, x: float, y: float, s_hint: Optional[float] = None,
                window: float = 15.0) -> tuple[float, float, float]:
        """Foot point of (x, y) on the centerline.

        Returns ``(s, d, dist)`` with ``d`` signed left-positive. With
        ``s_hint`` only segments within ``window`` meters are searched.
        """
        if s_hint is None or len(self.seg) < 8:
            lo, hi = 0, len(self.seg)
        else:
            lo = max(int(np.searchsorted(self.s, s_hint - window)) - 1, 0)
            hi = min(int(np.searchsorted(self.s, s_hint + window)) + 1, len(self.seg))
        if hi - lo <= 4:
            return self._project_small(x, y, lo, hi)
        p0 = self.points[lo:hi]
        dirs = self.seg_dir[lo:hi]
        lens = self.seg_len[lo:hi]
        rx = x - p0[:, 0]
        ry = y - p0[:, 1]
        t = np.clip(rx * dirs[:, 0] + ry * dirs[:, 1], 0.0, lens)
        fx = rx - t * dirs[:, 0]
        fy = ry - t * dirs[:, 1]
        dist2 = fx * fx + fy * fy
        k = int(np.argmin(dist2))
        cross = dirs[k, 0] * fy[k] - dirs[k, 1] * fx[k]
        dist = math.sqrt(float(dist2[k]))
        d = dist if cross >= 0.0 else -dist
        return float(self.s[lo + k] + t[k]), d, dist

    def _project_small(self, x: float, y: float, lo: int, hi: int) -> tuple[float, float, float]:
        # plain-float path; numpy call overhead dominates for a few segments
        best = None
        for k in range(lo, hi):
            px, py = self._pts[k]
            ux, uy = self._dirs[k]
            rx, ry = x - px, y - py
            t = min(max(rx * ux + ry * uy, 0.0), self._lens[k])
            fx, fy = rx - t * ux, ry - t * uy
            d2 = fx * fx + fy * fy
            if best is None or d2 < best[0]:
                best = (d2, k, t, ux * fy - uy * fx)
        d2, k, t, cross = best
        dist = math.sqrt(d2)
        return self._s[k] + t, (dist if cross >= 0.0 else -dist), dist

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "centerline": [[float(x), float(y)] for x, y in self.points],
            "width": self.width,
            "speed_limit": self.speed_limit,
            "successors": list(self.successors),
            "left_neighbor": self.left_neighbor,
            "right_neighbor": self.right_neighbor,
            "crossing_zones": [list(z) for z in self.crossing_zones],
        }


def _vertex_curvature(pts: np.ndarray) -> np.ndarray:
    """Circumscribed-circle curvature at each vertex; ends copy their neighbor."""
    n = len(pts)
    kappa = np.zeros(n)
    if n < 3:
        return kappa
    a = pts[1:-1] - pts[:-2]
    b = pts[2:] - pts[1:-1]
    c = pts[2:] - pts[:-2]
    cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    denom = np.hypot(a[:, 0], a[:, 1]) * np.hypot(b[:, 0], b[:, 1]) * np.hypot(c[:, 0], c[:, 1])
    kappa[1:-1] = 2.0 * cross / denom
    kappa[0] = kappa[1]
    kappa[-1] = kappa[-2]
    return kappa


def curvature_at(lane: Lane, s: float) -> float:
    return float(lane.curvature_at(s))


class MapModel:
    """Immutable collection of lanes plus the signals placed on them."""

    def __init__(self, lanes: Iterable[Lane], version: str = "",
                 signals: Iterable[Signal] = ()):
        self.lanes: dict[str, Lane] = {}
        for lane in lanes:
            if lane.id in self.lanes:
                raise MapError(f"duplicate lane id {lane.id!r}")
            self.lanes[lane.id] = lane
        self.version = str(version)
        self.signals = tuple(signals)
        self._check_references()

    def _check_references(self):
        for lane in self.lanes.values():
            for succ in lane.successors:
                if succ not in self.lanes:
                    raise ReferentialIntegrityError(
                        f"lane {lane.id!r} names unknown successor {succ!r}", succ)
            for side, other in (("left", lane.left_neighbor), ("right", lane.right_neighbor)):
                if other is None:
                    continue
                if other not in self.lanes:
                    raise ReferentialIntegrityError(
                        f"lane {lane.id!r} names unknown {side} neighbor {other!r}", other)
                back = self.lanes[other].right_neighbor if side == "left" else self.lanes[other].left_neighbor
                if back != lane.id:
                    raise MapError(f"neighbor relation not symmetric: {lane.id!r}.{side} = {other!r}"
                                   f" but the reverse link is {back!r}")
        for sig in self.signals:
            if sig.lane_id not in self.lanes:
                raise ReferentialIntegrityError(
                    f"signal names unknown lane {sig.lane_id!r}", sig.lane_id)
            if sig.kind not in SIGN_KINDS:
                raise MapError(f"unknown signal kind {sig.kind!r}")

    def __contains__(self, lane_id) -> bool:
        return lane_id in self.lanes

    def __getitem__(self, lane_id: str) -> Lane:
        return self.lanes[lane_id]

    @cached_property
    def predecessors(self) -> dict[str, tuple[str, ...]]:
        pred: dict[str, list[str]] = {k: [] for k in self.lanes}
        for lane in self.lanes.values():
            for succ in lane.successors:
                pred[succ].append(lane.id)
        return {k: tuple(sorted(v)) for k, v in pred.items()}

    @cached_property
    def conflicts(self) -> dict[str, frozenset[str]]:
        """Lanes whose paths cross or merge, keyed both ways.

        Lanes that only touch where one feeds the other, or that diverge from
        a shared start, do not conflict.
        """
        return {k: frozenset(v) for k, v in self.conflict_extent.items()}

    @cached_property
    def conflict_extent(self) -> dict[str, dict[str, float]]:
        """``[a][b]``: arc length on ``b`` past which ``b`` no longer meets ``a``.

        That is the last crossing point on ``b``, or the end of ``b`` when
        the two lanes merge.
        """
        out: dict[str, dict[str, float]] = {k: {} for k in self.lanes}
        ids = sorted(self.lanes)
        for i, a_id in enumerate(ids):
            a = self.lanes[a_id]
            for b_id in ids[i + 1:]:
                b = self.lanes[b_id]
                if b_id in a.neighbors or b_id in a.successors or a_id in b.successors:
                    continue
                hits = _crossings(a, b)
                if set(a.successors) & set(b.successors):
                    hits.append((a.length, b.length))
                if hits:
                    out[a_id][b_id] = max(h[1] for h in hits)
                    out[b_id][a_id] = max(h[0] for h in hits)
        return out

    def project(self, x: float, y: float, d_max: float = DEFAULT_D_MAX) -> tuple[str, float, float]:
        """Nearest lane to a point: ``(lane_id, s, d)``; ties go to the lower id."""
        best = None
        for lane_id in sorted(self.lanes):
            s, d, dist = self.lanes[lane_id].project(x, y)
            if dist > d_max:
                continue
            if best is None or dist < best[3] - 1e-9:
                best = (lane_id, s, d, dist)
        if best is None:
            raise OffRoad(f"no lane within {d_max} m of ({x:.2f}, {y:.2f})")
        return best[0], best[1], best[2]

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "lanes": [self.lanes[k].to_dict() for k in sorted(self.lanes)],
            "signals": [{"kind": s.kind, "lane_id": s.lane_id, "s": s.s, "value": s.value}
                        for s in self.signals],
        }


def _polylines_cross(a: Lane, b: Lane, end_tol: float = 0.5) -> bool:
    return bool(_crossings(a, b, end_tol))


def _crossings(a: Lane, b: Lane, end_tol: float = 0.5) -> list[tuple[float, float]]:
    """Crossing points ``(s_a, s_b)``, ignoring shared start and end points."""
    # bounding boxes first
    amin, amax = a.points.min(axis=0), a.points.max(axis=0)
    bmin, bmax = b.points.min(axis=0), b.points.max(axis=0)
    if np.any(amin > bmax + 1e-9) or np.any(bmin > amax + 1e-9):
        return []
    p, r = a.points[:-1], a.seg
    q, sv = b.points[:-1], b.seg
    P = p[:, None, :]
    R = r[:, None, :]
    Q = q[None, :, :]
    S = sv[None, :, :]
    rxs = R[..., 0] * S[..., 1] - R[..., 1] * S[..., 0]
    qp = Q - P
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (qp[..., 0] * S[..., 1] - qp[..., 1] * S[..., 0]) / rxs
        u = (qp[..., 0] * R[..., 1] - qp[..., 1] * R[..., 0]) / rxs
    hit = (rxs != 0) & (t >= 0) & (t <= 1) & (u >= 0) & (u <= 1)
    if not hit.any():
        return []
    ia, ib = np.nonzero(hit)
    sa = a.s[ia] + t[ia, ib] * a.seg_len[ia]
    sb = b.s[ib] + u[ia, ib] * b.seg_len[ib]
    shared_start = (sa < end_tol) & (sb < end_tol)
    shared_end = (sa > a.length - end_tol) & (sb > b.length - end_tol)
    keep = ~(shared_start | shared_end)
    return list(zip(sa[keep].tolist(), sb[keep].tolist()))


# -- loading ------------------------------------------------------------------

def _field(d: dict, key: str, ctx: str, kind=float, required=True, default=None):
    if key not in d:
        if required:
            raise MapFormatError(f"missing field {key!r}", ctx)
        return default
    val = d[key]
    if val is None and not required:
        return None
    try:
        if kind is float:
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise TypeError
            return float(val)
        return kind(val)
    except (TypeError, ValueError):
        raise MapFormatError(f"field {key!r} has invalid value {val!r}", ctx) from None


def map_from_dict(data: dict, source: str = "<map>") -> MapModel:
    if not isinstance(data, dict):
        raise MapFormatError("top level must be an object", source)
    raw_lanes = data.get("lanes")
    if not isinstance(raw_lanes, list):
        raise MapFormatError("missing or invalid 'lanes' list", source)
    lanes = []
    for i, ld in enumerate(raw_lanes):
        ctx = f"{source}: lanes[{i}]"
        if not isinstance(ld, dict):
            raise MapFormatError("lane entry must be an object", ctx)
        lane_id = _field(ld, "id", ctx, kind=str)
        ctx = f"{source}: lanes[{i}] (id={lane_id})"
        cl = ld.get("centerline")
        if not isinstance(cl, list) or not all(isinstance(p, list) and len(p) == 2 for p in cl):
            raise MapFormatError("field 'centerline' must be a list of [x, y] pairs", ctx)
        try:
            lanes.append(Lane(
                lane_id, cl,
                width=_field(ld, "width", ctx, required=False, default=3.5),
                speed_limit=_field(ld, "speed_limit", ctx, required=False),
                successors=ld.get("successors", []),
                left_neighbor=ld.get("left_neighbor"),
                right_neighbor=ld.get("right_neighbor"),
                crossing_zones=ld.get("crossing_zones", []),
            ))
        except MapError as exc:
            raise MapFormatError(str(exc), ctx) from None
        except (TypeError, ValueError) as exc:
            raise MapFormatError(f"invalid lane definition ({exc})", ctx) from None
    signals = []
    for i, sd in enumerate(data.get("signals", [])):
        ctx = f"{source}: signals[{i}]"
        signals.append(Signal(_field(sd, "kind", ctx, kind=str), _field(sd, "lane_id", ctx, kind=str),
                              _field(sd, "s", ctx), _field(sd, "value", ctx, required=False, default=0.0)))
    return MapModel(lanes, version=str(data.get("version", "")), signals=signals)


def load_map(path) -> MapModel:
    path = Path(path)
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MapFormatError(exc.msg, f"{path}:{exc.lineno}:{exc.colno}") from None
    return map_from_dict(data, source=str(path))


def save_map(map_model: MapModel, path) -> None:
    Path(path).write_text(json.dumps(map_model.to_dict(), indent=1))


# -- routing ------------------------------------------------------------------

@dataclass(frozen=True)
class Route:
    lane_ids: tuple[str, ...]
    total_length: float
    lane_change_count: int
    start: tuple[str, float]
    goal: tuple[str, float]
    cost: float = 0.0

    def edges(self, map_model: MapModel) -> list[str]:
        """Edge kind between consecutive lanes: ``'successor'``, ``'left'`` or ``'right'``."""
        kinds = []
        for a, b in zip(self.lane_ids, self.lane_ids[1:]):
            lane = map_model.lanes[a]
            if b == lane.left_neighbor:
                kinds.append("left")
            elif b == lane.right_neighbor:
                kinds.append("right")
            else:
                kinds.append("successor")
        return kinds


def _check_position(map_model: MapModel, pos: tuple[str, float], what: str):
    lane_id, s = pos
    if lane_id not in map_model.lanes:
        raise NoRoute(f"{what} lane {lane_id!r} not in map")
    if not -1e-6 <= s <= map_model.lanes[lane_id].length + 1e-6:
        raise NoRoute(f"{what} s={s} outside lane {lane_id!r}")


def shortest_route(map_model: MapModel, start: tuple[str, float], goal: tuple[str, float],
                   lane_change_penalty: float = DEFAULT_LANE_CHANGE_PENALTY) -> Route:
    """Dijkstra over lanes; lane-change edges cost ``lane_change_penalty`` meters.

    Search states are ``(lane, still_in_start_segment)``: while no successor
    edge has been taken the goal must lie ahead of the start position.
    Ties resolve by fewer lane changes, then lexicographically smaller lane
    id sequence.
    """
    _check_position(map_model, start, "start")
    _check_position(map_model, goal, "goal")
    s_lane, s_pos = start
    g_lane, g_pos = goal
    lanes = map_model.lanes
    heap = [(-s_pos, 0, (s_lane,), s_lane, True)]
    done: set[tuple[str, bool]] = set()
    while heap:
        cost, n_lc, path, lane_id, fresh = heapq.heappop(heap)
        state = (lane_id, fresh)
        if state in done:
            continue
        done.add(state)
        if lane_id == g_lane and (not fresh or g_pos >= s_pos):
            total = cost + g_pos
            return Route(path, total - n_lc * lane_change_penalty, n_lc, start, goal, total)
        lane = lanes[lane_id]
        for succ in lane.successors:
            if (succ, False) not in done:
                heapq.heappush(heap, (cost + lane.length, n_lc, path + (succ,), succ, False))
        for nb in lane.neighbors:
            if (nb, fresh) not in done:
                heapq.heappush(heap, (cost + lane_change_penalty, n_lc + 1, path + (nb,), nb, fresh))
    raise NoRoute(f"goal {goal} unreachable from {start}")


# -- generated roads ----------------------------------------------------------

def _heading_integral(breaks: Sequence[float], kappas: Sequence[float], s: np.ndarray) -> np.ndarray:
    """Heading for a piecewise-linear curvature profile, in closed form."""
    theta = np.zeros_like(s)
    for (s0, s1), (k0, k1) in zip(zip(breaks[:-1], breaks[1:]), zip(kappas[:-1], kappas[1:])):
        L = s1 - s0
        if L <= 0:
            continue
        u = np.clip(s - s0, 0.0, L)
        theta += k0 * u + 0.5 * (k1 - k0) * u * u / L
    return theta


def integrate_profile(breaks: Sequence[float], kappas: Sequence[float],
                      step: float = CLOTHOID_STEP, x0: float = 0.0, y0: float = 0.0,
                      yaw0: float = 0.0) -> np.ndarray:
    """Polyline for a curvature profile by stepping ``step`` meters along heading.

    ``kappas[i]`` is the curvature at ``breaks[i]``; curvature varies
    linearly in between. Each step uses the heading at its midpoint, so the
    chord between consecutive points has exactly the step length.
    """
    total = breaks[-1] - breaks[0]
    n = int(math.floor(total / step + 1e-9))
    edges = breaks[0] + step * np.arange(n + 1)
    if total - n * step > 1e-9:
        edges = np.append(edges, breaks[-1])
    mids = 0.5 * (edges[:-1] + edges[1:])
    h = np.diff(edges)
    theta = yaw0 + _heading_integral(breaks, kappas, mids)
    x = x0 + np.concatenate(([0.0], np.cumsum(h * np.cos(theta))))
    y = y0 + np.concatenate(([0.0], np.cumsum(h * np.sin(theta))))
    return np.column_stack((x, y))


def road_profile(r_arc: float, spiral_len: float, line_len: float,
                      arc_len: float = 100.0, left: bool = True):
    """Breakpoints and curvatures of a line-spiral-arc-spiral-line road."""
    k = (1.0 if left else -1.0) / r_arc
    b = np.cumsum([0.0, line_len, spiral_len, arc_len, spiral_len, line_len])
    return list(b), [0.0, 0.0, k, k, 0.0, 0.0]


def generate_test_road(r_arc: float, spiral_len: float, line_len: float,
                       lane_width: float = 3.5, arc_len: float = 100.0,
                       left: bool = True, speed_limit: Optional[float] = None,
                       lane_id: str = "road") -> MapModel:
    """Single-lane road: line, clothoid, arc of radius ``r_arc``, clothoid, line."""
    if not r_arc > 0:
        raise ValueError("r_arc must be positive")
    if spiral_len < 0 or line_len < 0 or arc_len < 0:
        raise ValueError("segment lengths must be non-negative")
    breaks, kappas = road_profile(r_arc, spiral_len, line_len, arc_len, left)
    # zero-length spirals become empty pieces, leaving a curvature step
    pts = integrate_profile(breaks, kappas)
    version = f"testroad-r{r_arc:g}-sp{spiral_len:g}-l{line_len:g}-a{arc_len:g}"
    lane = Lane(lane_id, pts, width=lane_width, speed_limit=speed_limit)
    return MapModel([lane], version=version)
