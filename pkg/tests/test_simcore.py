import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from shapely.geometry import Polygon

from agentsim.messages import MovingObjectState, Pose2
from agentsim.simcore import (
    ScenarioError, Simulation, box_corners, detect_collisions, load_scenario, packaged_path, run,
)

from conftest import make_scenario


def _obj(oid, x, y, yaw=0.0, length=4.5, width=1.8):
    return MovingObjectState(oid, Pose2(x, y, yaw), 0.0, 0.0, length, width)


def _traffic(n=6, duration=4.0):
    agents = [{"id": f"c{i}", "lane_id": "lane_0", "s": 10.0 + 25.0 * i, "v": 8.0 + (i % 3),
               "parameters": {"v_desired": 10.0 + i}} for i in range(n)]
    agents[0]["commands"] = [{"t": 1.0, "actions": [{"action": "SpeedAction", "v_target": 6.0}]}]
    return make_scenario(agents, duration=duration)


def test_load_following():
    sc = load_scenario(packaged_path("scenarios", "following.json"))
    assert len(sc.agents) == 2
    assert sc.duration == 60.0
    assert sc.steps == 6000


def test_scenario_errors(tmp_path):
    with pytest.raises(ScenarioError, match="outside lane"):
        make_scenario([{"id": "a", "lane_id": "lane_0", "s": 5000.0}])
    with pytest.raises(ScenarioError, match="duplicate agent id"):
        make_scenario([{"id": "a", "lane_id": "lane_0", "s": 1.0}, {"id": "a", "lane_id": "lane_0", "s": 50.0}])
    with pytest.raises(ScenarioError, match="not in map"):
        make_scenario([{"id": "a", "lane_id": "nowhere", "s": 1.0}])
    bad = tmp_path / "bad.json"
    bad.write_text('{"duration": 5,')
    with pytest.raises(ScenarioError, match="bad.json:1"):
        load_scenario(bad)
    unk = tmp_path / "unk.json"
    unk.write_text(json.dumps({"map": {"generator": "straight"}, "duration": 5,
                               "agents": [{"id": "a", "lane_id": "lane_0", "s": 1, "parameters": {"zz": 1}}]}))
    with pytest.raises(ScenarioError, match="zz"):
        load_scenario(unk)


def test_stationary_agent_and_timestamps():
    sc = make_scenario([{"id": "a", "lane_id": "lane_0", "s": 20.0, "v": 0.0,
                         "commands": [{"t": 0.0, "actions": [{"action": "SpeedAction", "v_target": 0.0}]}]}],
                       duration=3.0)
    log = run(sc)
    tr = log.agents["a"]
    assert len(tr) == sc.steps
    assert np.array_equal(tr["t"], np.arange(sc.steps) * sc.dt)
    for ch in ("x", "y", "yaw"):
        assert np.all(tr[ch] == tr[ch][0])
    assert np.all(tr["v"] == 0.0)


def test_run_deterministic():
    sc = _traffic()
    assert run(sc).fingerprint() == run(sc).fingerprint()


def test_order_and_parallel_invariant():
    sc = _traffic()
    ref = run(sc).fingerprint()
    ids = [a.id for a in sc.agents]
    assert run(sc, order=list(reversed(ids))).fingerprint() == ref
    assert run(sc, order=ids[3:] + ids[:3]).fingerprint() == ref
    assert run(sc, parallel=True).fingerprint() == ref
    with pytest.raises(ValueError):
        Simulation(sc, order=ids[1:])


def test_collision_cases():
    assert detect_collisions([_obj("a", 0, 0), _obj("b", 100, 0)]) == []
    assert detect_collisions([_obj("b", 0, 0), _obj("a", 0, 0)]) == [("a", "b")]
    # corner to corner contact counts
    assert detect_collisions([_obj("a", 0, 0), _obj("b", 4.5, 1.8)]) == [("a", "b")]
    assert detect_collisions([_obj("a", 0, 0), _obj("b", 4.5 + 1e-6, 1.8)]) == []
    # rotated box whose bounding circle overlaps but body does not
    assert detect_collisions([_obj("a", 0, 0), _obj("b", 3.9, 2.4, math.pi / 4, 1.0, 1.0)]) == []


def test_collision_event_once_per_contact():
    sc = make_scenario([
        {"id": "fast", "lane_id": "lane_0", "s": 10.0, "v": 15.0,
         "parameters": {"a_max": 0.01, "b": 0.01, "v_desired": 15.0}},
        {"id": "slow", "lane_id": "lane_0", "s": 30.0, "v": 0.0,
         "commands": [{"t": 0.0, "actions": [{"action": "SpeedAction", "v_target": 0.0}]}]},
    ], duration=4.0)
    log = run(sc)
    ev = log.events_of("collision")
    assert len(ev) == 1 and ev[0].agents == ("fast", "slow")


_coord = st.floats(-6.0, 6.0, allow_nan=False)
_box = st.tuples(_coord, _coord, st.floats(-math.pi, math.pi), st.floats(0.5, 6.0), st.floats(0.5, 3.0))


@settings(max_examples=1000)
@given(_box, _box)
def test_collisions_match_polygon_oracle(a, b):
    pa, pb = Polygon(box_corners(*a)), Polygon(box_corners(*b))
    gap = pa.distance(pb)
    got = bool(detect_collisions([_obj("a", *a), _obj("b", *b)]))
    if gap > 1e-6:
        assert not got
    elif pa.intersection(pb).area > 1e-9:
        assert got


def test_log_write(tmp_path):
    log = run(_traffic(n=2, duration=1.0))
    paths = log.write(tmp_path)
    assert {p.name for p in paths} == {"t_c0.csv", "t_c1.csv", "t_events.json"}
    header = (tmp_path / "t_c0.csv").read_text().splitlines()[0]
    assert header.startswith("t,") and "lane" in header
    assert json.loads((tmp_path / "t_events.json").read_text())["steps"] == 100
