import dataclasses
import math

import pytest

from agentsim.host import (
    INITIALIZED, INSTANTIATED, PORT_MOTION_REQUEST, PORT_SENSOR_VIEW, PORT_TRAFFIC_COMMAND,
    PORT_TRAFFIC_UPDATE, STEPPING, TERMINATED, ComponentDescriptor, ComponentHost, DescriptorError,
    LifecycleError, StaleHandle, StepError, UnknownName, build_descriptor, load_descriptor, replay,
)
from agentsim.messages import (
    AcquireGlobalPosition, MovingObjectState, Pose2, SensorView, SpeedAction, TrafficCommand, decode,
)
from agentsim.roadgen import generate_straight_road
from agentsim.simcore import Simulation

from conftest import make_scenario

MAP = generate_straight_road(length=1000.0)


def _host():
    h = ComponentHost()
    h.publish_map(MAP)
    return h


def _view(t=0.0, x=10.0, v=10.0, ego="e"):
    return SensorView(t, ego, (MovingObjectState(ego, Pose2(x, 0.0), v, 0.0, 4.5, 1.8, "lane_0", x),),
                      MAP.version)


def _ready(h, iid="e"):
    inst = h.instantiate(iid)
    inst.initialize()
    return inst


def test_packaged_descriptor_matches_code():
    assert load_descriptor().to_dict() == build_descriptor().to_dict()


def test_instantiate_defaults():
    inst = _host().instantiate("a")
    assert inst.state == INSTANTIATED
    assert inst.get_parameter("T") == 2.0


def test_duplicate_port_rejected():
    d = build_descriptor().to_dict()
    d["outputs"] = d["outputs"] + [d["inputs"][0]]
    with pytest.raises(DescriptorError, match="duplicate port"):
        ComponentDescriptor.from_dict(d)
    d = build_descriptor().to_dict()
    d["parameters"][0]["default"] = None
    with pytest.raises(DescriptorError, match="no default"):
        ComponentDescriptor.from_dict(d)


def test_instances_isolated():
    h = _host()
    insts = [h.instantiate(f"a{i}") for i in range(20)]
    insts[7].set_parameter("T", 1.2)
    assert insts[7].get_parameter("T") == 1.2
    assert all(i.get_parameter("T") == 2.0 for k, i in enumerate(insts) if k != 7)
    assert len({id(i.values) for i in insts}) == 20


def test_parameter_errors():
    inst = _host().instantiate("a")
    with pytest.raises(UnknownName, match="nope"):
        inst.set_parameter("nope", 1.0)
    with pytest.raises(TypeError):
        inst.set_parameter("T", "fast")
    with pytest.raises(TypeError):
        inst.set_parameter("debug", 1.0)
    with pytest.raises(ValueError):
        inst.set_parameter("T", -1.0)
    assert inst.get_parameter("T") == 2.0


def test_parameter_visible_next_step():
    h = _host()
    inst = _ready(h)
    inst.set_input(PORT_SENSOR_VIEW, h.put(_view()))
    inst.do_step(0.0, 0.01)
    inst.set_parameter("v_desired", 13.88)
    inst.set_input(PORT_SENSOR_VIEW, h.put(_view(0.01)))
    inst.do_step(0.01, 0.01)
    assert inst.get_real("v_T") == 13.88


def test_stale_handle():
    h = _host()
    inst = _ready(h)
    handle = h.put(_view())
    inst.set_input(PORT_SENSOR_VIEW, handle)
    inst.do_step(0.0, 0.01)
    with pytest.raises(StaleHandle):
        inst.set_input(PORT_SENSOR_VIEW, handle)
    with pytest.raises(StaleHandle):
        h.registry.release(handle)
    with pytest.raises(UnknownName):
        inst.set_input("Bogus", h.put(_view()))


def test_step_contract():
    h = _host()
    inst = _ready(h)
    inst.set_input(PORT_SENSOR_VIEW, h.put(_view(1.0)))
    inst.do_step(1.0, 0.01)
    assert inst.state == STEPPING
    upd = h.take(inst.get_output(PORT_TRAFFIC_UPDATE))
    assert upd.timestamp == 1.0 + 0.01
    assert upd.state.id == "e"
    req = h.take(inst.get_output(PORT_MOTION_REQUEST))
    assert math.isfinite(req.a_des) and math.isfinite(req.kappa_des)


def test_missing_sensor_view():
    h = _host()
    inst = _ready(h)
    with pytest.raises(StepError, match="no SensorView"):
        inst.do_step(0.0, 0.01)
    assert inst.state == INITIALIZED
    inst.set_input(PORT_SENSOR_VIEW, h.put(_view()))
    inst.do_step(0.0, 0.01)
    assert inst.state == STEPPING


def test_event_driven_commands_persist():
    h = _host()
    inst = _ready(h)
    inst.set_input(PORT_SENSOR_VIEW, h.put(_view()))
    inst.set_input(PORT_TRAFFIC_COMMAND, h.put(TrafficCommand(0.0, (SpeedAction(5.0),
                                                                     AcquireGlobalPosition(600.0, 0.0)))))
    inst.do_step(0.0, 0.01)
    for k in range(1, 5):
        inst.set_input(PORT_SENSOR_VIEW, h.put(_view(0.01 * k)))
        inst.do_step(0.01 * k, 0.01)
    assert inst.adapter.v_command == 5.0
    assert inst.get_real("v_T") == 5.0
    assert inst.adapter.goal[0] == "lane_0"


def test_lifecycle_rules():
    h = _host()
    inst = h.instantiate("a")
    with pytest.raises(LifecycleError):
        inst.do_step(0.0, 0.01)
    with pytest.raises(LifecycleError):
        inst.set_input(PORT_SENSOR_VIEW, h.put(_view(ego="a")))
    inst.initialize()
    with pytest.raises(LifecycleError):
        inst.initialize()
    inst.set_input(PORT_SENSOR_VIEW, h.put(_view(ego="a")))
    inst.do_step(0.0, 0.01)
    inst.reset()
    assert inst.state == INITIALIZED and inst.get_output(PORT_TRAFFIC_UPDATE) is None
    inst.terminate()
    assert inst.state == TERMINATED
    for op in (lambda: inst.do_step(0.0, 0.01), lambda: inst.set_parameter("T", 1.0), inst.reset):
        with pytest.raises(LifecycleError):
            op()


def test_clones_bit_identical():
    outs = []
    for _ in range(2):
        h = _host()
        inst = _ready(h)
        seq = []
        for k in range(50):
            inst.set_input(PORT_SENSOR_VIEW, h.put(_view(0.01 * k, 10.0 + 0.1 * k, 10.0)))
            inst.do_step(0.01 * k, 0.01)
            seq.append((h.registry.get(inst.get_output(PORT_TRAFFIC_UPDATE)),
                        h.registry.get(inst.get_output(PORT_MOTION_REQUEST))))
        outs.append(seq)
    assert outs[0] == outs[1]


def test_replay_reproduces_run():
    sc = make_scenario([
        {"id": "ego", "lane_id": "lane_0", "s": 10.0, "v": 12.0, "parameters": {"T": 1.6},
         "commands": [{"t": 1.0, "actions": [{"action": "SpeedAction", "v_target": 9.0}]}]},
        {"id": "lead", "lane_id": "lane_0", "s": 60.0, "v": 8.0},
    ], duration=6.0)
    sim = Simulation(sc, record=True)
    log = sim.run()
    spec = next(a for a in sc.agents if a.id == "ego")
    params = {"length": spec.length, "width": spec.width, **spec.parameters}
    outs = replay(sim.records["ego"], sc.map, params, "ego")
    tr = log.agents["ego"]
    assert len(outs) == len(tr)
    for k, (tu, mr) in enumerate(outs):
        req = decode(mr)
        assert (req.a_des, req.kappa_des) == (tr.cols["a_des"][k], tr.cols["kappa_des"][k])
        if k + 1 < len(tr):
            st_ = decode(tu).state
            assert (st_.pose.x, st_.pose.y, st_.pose.yaw, st_.velocity) == (
                tr.cols["x"][k + 1], tr.cols["y"][k + 1], tr.cols["yaw"][k + 1], tr.cols["v"][k + 1])


def test_direct_pass_has_no_update():
    h = _host()
    inst = h.instantiate("e")
    inst.set_parameter("direct_pass", True)
    inst.initialize()
    inst.set_input(PORT_SENSOR_VIEW, h.put(_view()))
    inst.do_step(0.0, 0.01)
    assert inst.get_output(PORT_TRAFFIC_UPDATE) is None
    assert inst.get_output(PORT_MOTION_REQUEST) is not None


def test_descriptor_frozen():
    with pytest.raises(dataclasses.FrozenInstanceError):
        build_descriptor().name = "x"
