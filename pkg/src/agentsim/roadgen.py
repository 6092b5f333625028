"""Parametric map generators used by the scenario catalog and the tests."""

from __future__ import annotations

import math
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from agentsim.lanemap import Lane, MapModel, generate_test_road
from agentsim.messages import SIGN_SPEED_LIMIT, SIGN_STOP_LINE, Signal

__all__ = ["generate_test_road", "generate_straight_road", "generate_intersection"]


def generate_straight_road(n_lanes: int = 1, length: float = 1000.0, lane_width: float = 3.5,
                           speed_limit: Optional[float] = None,
                           signs: Sequence[tuple[float, float]] = (),
                           crossing_zones: Sequence[tuple[float, float]] = (),
                           origin: tuple[float, float] = (0.0, 0.0)) -> MapModel:
    """Straight road along +x with ``n_lanes`` same-direction lanes.

    Lane ``lane_0`` is the rightmost. ``signs`` are ``(s, limit)`` pairs put
    on every lane; ``crossing_zones`` apply to every lane.
    """
    if n_lanes < 1:
        raise ValueError("n_lanes must be >= 1")
    x0, y0 = origin
    lanes = []
    for i in range(n_lanes):
        y = y0 + i * lane_width
        lanes.append(Lane(
            f"lane_{i}", [[x0, y], [x0 + length, y]], width=lane_width,
            speed_limit=speed_limit,
            left_neighbor=f"lane_{i + 1}" if i + 1 < n_lanes else None,
            right_neighbor=f"lane_{i - 1}" if i > 0 else None,
            crossing_zones=crossing_zones,
        ))
    signals = [Signal(SIGN_SPEED_LIMIT, f"lane_{i}", float(s), float(v))
               for s, v in signs for i in range(n_lanes)]
    return MapModel(lanes, version=f"straight-{n_lanes}x{length:g}", signals=signals)


_ARMS = ("S", "E", "N", "W")  # counter-clockwise; S arm incoming lanes drive north


def _rot(points: np.ndarray, quarter_turns: int) -> np.ndarray:
    a = quarter_turns * math.pi / 2
    c, s = round(math.cos(a)), round(math.sin(a))
    return np.column_stack((c * points[:, 0] - s * points[:, 1], s * points[:, 0] + c * points[:, 1]))


def _arc(cx: float, cy: float, r: float, a0: float, a1: float, step: float = 0.5) -> np.ndarray:
    n = max(int(math.ceil(abs(a1 - a0) * r / step)), 2)
    a = np.linspace(a0, a1, n + 1)
    return np.column_stack((cx + r * np.cos(a), cy + r * np.sin(a)))


def generate_intersection(arm_length: float = 100.0, lane_width: float = 3.5,
                          lanes_in: int = 1, half_size: float = 12.0,
                          movements: Iterable[str] = ("right", "straight", "left"),
                          stop_lines: Union[bool, Iterable[str]] = True, solid_length: float = 15.0,
                          speed_limit: Optional[float] = None) -> MapModel:
    """Four-arm junction centered on the origin, right-hand traffic.

    Each arm has ``lanes_in`` incoming lanes (``{arm}_in{i}``, ``i = 0`` next
    to the road center) and one outgoing lane ``{arm}_out``. Connector lanes
    ``{from}>{to}`` realize the requested movements; with two incoming lanes
    the inner one serves left/straight and the outer one right/straight. The
    last ``solid_length`` meters of incoming lanes forbid lane changes, and
    connectors forbid them throughout. With ``movements=()`` only the arms
    are generated. ``stop_lines`` is a flag for all arms or the arms that
    get a stop line; arms without one have priority.
    """
    movements = tuple(movements)
    if isinstance(stop_lines, bool):
        stop_arms = set(_ARMS) if stop_lines else set()
    else:
        stop_arms = set(stop_lines)
        if not stop_arms <= set(_ARMS):
            raise ValueError(f"unknown arm(s) in stop_lines: {sorted(stop_arms - set(_ARMS))}")
    h = half_size
    w = lane_width
    lanes: list[Lane] = []
    signals: list[Signal] = []
    for k, arm in enumerate(_ARMS):
        right_arm = _ARMS[(k + 1) % 4]
        ahead_arm = _ARMS[(k + 2) % 4]
        left_arm = _ARMS[(k + 3) % 4]
        in_ids = [f"{arm}_in{i}" for i in range(lanes_in)]
        for i in range(lanes_in):
            x = w * (i + 0.5)
            pts = _rot(np.array([[x, -h - arm_length], [x, -h]]), k)
            succ = []
            if movements:
                serves = set(movements)
                if lanes_in > 1:
                    serves &= {"left", "straight"} if i == 0 else (
                        {"right", "straight"} if i == lanes_in - 1 else {"straight"})
                target = {"right": right_arm, "straight": ahead_arm, "left": left_arm}
                succ = [f"{arm}{i}>{target[m]}" if lanes_in > 1 else f"{arm}>{target[m]}"
                        for m in ("right", "straight", "left") if m in serves]
            zones = [(arm_length - solid_length, arm_length)] if lanes_in > 1 and solid_length > 0 else []
            lanes.append(Lane(
                in_ids[i], pts, width=w, speed_limit=speed_limit, successors=succ,
                left_neighbor=in_ids[i - 1] if i > 0 else None,
                right_neighbor=in_ids[i + 1] if i + 1 < lanes_in else None,
                crossing_zones=zones,
            ))
            if arm in stop_arms and movements:
                signals.append(Signal(SIGN_STOP_LINE, in_ids[i], arm_length, 0.0))
        out_pts = _rot(np.array([[-w / 2, -h], [-w / 2, -h - arm_length]]), k)
        lanes.append(Lane(f"{arm}_out", out_pts, width=w, speed_limit=speed_limit))

        for i in range(lanes_in if movements else 0):
            x = w * (i + 0.5)
            serves = set(movements)
            if lanes_in > 1:
                serves &= {"left", "straight"} if i == 0 else (
                    {"right", "straight"} if i == lanes_in - 1 else {"straight"})
            for m in ("right", "straight", "left"):
                if m not in serves:
                    continue
                if m == "straight":
                    # ends on the axis of the opposite outgoing lane
                    base = np.column_stack((np.linspace(x, w / 2, 9), np.linspace(-h, h, 9)))
                    to = ahead_arm
                elif m == "right":
                    r = h - x
                    base = _arc(h, -h, r, math.pi, math.pi / 2)
                    base[-1] = [h, -w / 2]
                    to = right_arm
                else:
                    r = h + x
                    base = _arc(-h, -h, r, 0.0, math.pi / 2)
                    to = left_arm
                    base[-1] = [-h, w / 2]
                cid = f"{arm}{i}>{to}" if lanes_in > 1 else f"{arm}>{to}"
                lanes.append(Lane(cid, _rot(base, k), width=w, speed_limit=speed_limit,
                                  successors=[f"{to}_out"], crossing_zones=[(0.0, 1e6)]))
    tag = "x".join(movements) if movements else "arms"
    stops = "".join(a for a in _ARMS if a in stop_arms) or "none"
    return MapModel(lanes, version=f"intersection-{lanes_in}in-{tag}-stop{stops}", signals=signals)
