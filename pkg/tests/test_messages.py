import math

import pytest
from hypothesis import given, strategies as st

from agentsim.lanemap import Lane, MapModel
from agentsim.messages import (
    AcquireGlobalPosition, DecodeError, MotionRequest, MovingObjectState, Pose2, SensorView, Signal,
    SpeedAction, TrafficCommand, TrafficUpdate, decode, encode, normalize_angle, validate_sensor_view,
)

finite = st.floats(-1e6, 1e6, allow_nan=False)
ids = st.text("abcdefgh0123456789_", min_size=1, max_size=6)


@st.composite
def objects(draw, oid=None):
    return MovingObjectState(
        oid or draw(ids), Pose2(draw(finite), draw(finite), draw(st.floats(-10, 10))),
        draw(st.floats(0, 80)), draw(st.floats(-8, 4)), draw(st.floats(0.5, 20)),
        draw(st.floats(0.5, 4)), draw(st.none() | ids), draw(st.floats(0, 1e4)))


@st.composite
def sensor_views(draw):
    ego = draw(objects("ego"))
    others = draw(st.lists(objects(), max_size=5, unique_by=lambda o: o.id))
    others = [o for o in others if o.id != "ego"]
    sigs = draw(st.lists(st.builds(Signal, st.sampled_from(["speed_limit", "stop_line"]), ids,
                                   st.floats(0, 1e3), st.floats(0, 40)), max_size=3))
    return SensorView(draw(st.floats(0, 1e4)), "ego", tuple([ego] + others), draw(ids), tuple(sigs))


actions = st.one_of(st.builds(AcquireGlobalPosition, finite, finite),
                    st.builds(SpeedAction, st.floats(0, 60)))
messages = st.one_of(
    sensor_views(),
    st.builds(TrafficCommand, st.floats(0, 1e4), st.lists(actions, max_size=4).map(tuple)),
    st.builds(MotionRequest, st.floats(-10, 10), st.floats(-0.5, 0.5)),
    st.builds(TrafficUpdate, st.floats(0, 1e4), objects()),
)


@given(messages)
def test_round_trip(msg):
    assert decode(encode(msg)) == msg


@given(st.floats(-100, 100))
def test_normalize_idempotent_and_in_range(theta):
    n = normalize_angle(theta)
    assert -math.pi < n <= math.pi
    assert normalize_angle(n) == n
    assert math.isclose(math.cos(n), math.cos(theta), abs_tol=1e-9)


def test_pose_yaw_normalized():
    assert Pose2(0, 0, 3 * math.pi).yaw == pytest.approx(math.pi)
    assert Pose2(0, 0, -math.pi).yaw == pytest.approx(math.pi)


def test_sensor_view_order_preserved():
    objs = tuple(MovingObjectState(i, Pose2(k, 0.0), 1.0) for k, i in enumerate(("c", "a", "b")))
    view = SensorView(1.0, "a", objs)
    back = decode(encode(view))
    assert [o.id for o in back.objects] == ["c", "a", "b"]
    for o, p in zip(objs, back.objects):
        assert o == p


def test_decode_errors():
    with pytest.raises(DecodeError) as e:
        decode(b"")
    assert e.value.reason == "truncated"
    data = encode(MotionRequest(1.0, 0.0))
    with pytest.raises(DecodeError) as e:
        decode(data[:-3])
    assert e.value.reason == "truncated"
    with pytest.raises(DecodeError) as e:
        decode(b'{"type": "Nope"}')
    assert e.value.reason == "malformed"
    with pytest.raises(DecodeError):
        decode(b'{"type": "MotionRequest", "a_des": 1}')


def _map():
    return MapModel([Lane("lane_1", [[0, 0], [100, 0]])], version="m")


def test_validate_well_formed():
    view = SensorView(0.0, "e", (MovingObjectState("e", Pose2(1, 0), 5.0, lane_id="lane_1"),))
    assert validate_sensor_view(view, _map()).ok


def test_validate_findings():
    m = _map()
    assert validate_sensor_view(SensorView(0.0, "e", ()), m).codes() == ["ego absent"]
    view = SensorView(0.0, "e", (MovingObjectState("e", Pose2(0, 0), 0.0, lane_id="lane_99"),))
    assert "unknown lane" in validate_sensor_view(view, m).codes()
    assert "lane_99" not in m.lanes  # oracle: membership
    bad = SensorView(0.0, "e", (MovingObjectState("e", Pose2(0, 0), -1.0),
                                MovingObjectState("e", Pose2(0, 0), 0.0)))
    codes = validate_sensor_view(bad, m).codes()
    assert {"negative velocity", "duplicate id", "ego duplicated"} <= set(codes)
    ok = SensorView(1.0, "e", (MovingObjectState("e", Pose2(0, 0), 0.0),))
    assert validate_sensor_view(ok, m, prev_timestamp=2.0).codes() == ["time regression"]


@given(sensor_views())
def test_validation_is_pure(view):
    m = _map()
    before = encode(view)
    r1 = validate_sensor_view(view, m)
    r2 = validate_sensor_view(view, m)
    assert r1 == r2
    assert encode(view) == before
