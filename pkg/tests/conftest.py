import math

import pytest
from hypothesis import HealthCheck, settings

from agentsim.lanemap import Lane, MapModel
from agentsim.roadgen import generate_straight_road
from agentsim.simcore import scenario_from_dict

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def straight():
    return generate_straight_road(n_lanes=1, length=500.0)


@pytest.fixture
def two_lane():
    return generate_straight_road(n_lanes=2, length=500.0, lane_width=4.0)


def chain_map(lengths=(100.0, 50.0, 80.0)):
    """Lanes L0 -> L1 -> ... laid end to end along +x."""
    lanes, x = [], 0.0
    for i, n in enumerate(lengths):
        succ = [f"L{i + 1}"] if i + 1 < len(lengths) else []
        lanes.append(Lane(f"L{i}", [[x, 0.0], [x + n, 0.0]], successors=succ))
        x += n
    return MapModel(lanes, version="chain")


def make_scenario(agents, map_spec=None, duration=10.0, **extra):
    d = {"name": extra.pop("name", "t"), "map": map_spec or {"generator": "straight", "length": 1000.0},
         "duration": duration, "agents": agents}
    d.update(extra)
    return scenario_from_dict(d)


def assert_close(a, b, rel=1e-9, abs_=1e-12):
    assert math.isclose(a, b, rel_tol=rel, abs_tol=abs_), (a, b)
