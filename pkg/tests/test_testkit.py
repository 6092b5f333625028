import json
import math
import shutil

import numpy as np
import pytest
from hypothesis import given, strategies as st

from agentsim.simcore import LOG_CHANNELS, AgentTrace, Event, SimulationLog, packaged_path, run
from agentsim.testkit import (
    Criterion, CriterionError, bench_scalability, count_sign_changes, emit_plot_data, evaluate,
    first_sign, linear_fit, replicate, run_catalog, settle_time, sustained_onset,
)

from conftest import make_scenario

DT = 0.01


def _log(n=100, agent="ego", **channels):
    """Synthetic log with ``n`` samples; unspecified channels are zero."""
    tr = AgentTrace()
    t = np.arange(n) * DT
    cols = {c: np.asarray(channels.get(c, np.zeros(n)), dtype=float) for c in LOG_CHANNELS}
    cols["t"] = t
    for i in range(n):
        tr.append({c: float(cols[c][i]) for c in LOG_CHANNELS}, "lane_0")
    return SimulationLog("synthetic", DT, n, agents={agent: tr})


def _following_run():
    sc = make_scenario([
        {"id": "ego", "lane_id": "lane_0", "s": 10.0, "v": 14.0, "parameters": {"v_desired": 20.0}},
        {"id": "lead", "lane_id": "lane_0", "s": 45.0, "v": 8.0,
         "commands": [{"t": 0.0, "actions": [{"action": "SpeedAction", "v_target": 8.0}]}]},
    ], duration=8.0)
    return run(sc)


def test_min_thw_matches_positions():
    log = _following_run()
    ego, lead = log.agents["ego"], log.agents["lead"]
    gap = (lead["x"] - ego["x"]) - 0.5 * (4.5 + 4.5)
    moving = ego["v"] > 0.1
    brute = float((gap[moving] / ego["v"][moving]).min())
    got = evaluate(log, [{"metric": "min_thw", "op": ">=", "value": 0.0, "agent": "ego"}]).results[0].measured
    assert math.isclose(got, brute, rel_tol=1e-9)


def test_empty_criteria_pass_and_collision_fails():
    log = _log()
    assert evaluate(log, []).passed
    log.events.append(Event(0.5, "collision", ("a", "ego")))
    rep = evaluate(log, [{"metric": "collision_count", "op": "<=", "value": 0}])
    assert not rep.passed and rep.results[0].measured == 1.0


def test_invalid_criteria_reported():
    rep = evaluate(_log(), [{"metric": "bogus", "value": 1}, {"metric": "min_value", "op": "<=", "value": 1},
                            {"metric": "min_value", "channel": "nope", "op": "<=", "value": 1}])
    assert not rep.passed
    assert all(r.error for r in rep.results)
    with pytest.raises(CriterionError):
        Criterion("min_value", "between", (2.0, 1.0), channel="v")
    with pytest.raises(CriterionError):
        Criterion("min_value", "~", 1.0, channel="v")


def test_channel_metrics_on_synthetic_log():
    n = 100
    v = np.linspace(0.0, 9.9, n)
    log = _log(n, v=v)
    crit = lambda m, **kw: evaluate(log, [dict(metric=m, channel="v", op="<=", value=1e9, **kw)]).results[0].measured
    assert crit("settle_value") == pytest.approx(v[-20:].mean())
    assert crit("min_value") == 0.0 and crit("max_value") == pytest.approx(9.9)
    assert crit("mean_value", window=[0.2, 0.3]) == pytest.approx(v[20:31].mean())
    assert crit("value_at", reference={"t": 0.505}) == pytest.approx(5.05)


def test_onset_and_value_at_route_reference():
    n = 300
    a = np.where(np.arange(n) >= 120, -1.0, 0.0)
    a[50:60] = -1.0  # too short to count
    route_s = np.arange(n) * 0.1
    log = _log(n, a=a, route_s=route_s)
    rep = evaluate(log, [{"metric": "onset_lead_time", "op": "<=", "value": 1e9, "reference": {"route_s": 25.0}}])
    assert rep.results[0].measured == pytest.approx(2.5 - 1.2)


def test_onset_helper():
    t = np.arange(200) * DT
    a = np.zeros(200)
    a[100:149] = -0.1
    assert sustained_onset(t, a) is None
    a[100:151] = -0.1
    assert sustained_onset(t, a) == pytest.approx(1.0)


def test_settle_time_helper():
    t = np.arange(10.0)
    x = np.array([0, 5, 9, 11, 10, 10.2, 9.9, 10, 10, 10])
    assert settle_time(t, x, 10.0, 0.5) == 4.0
    assert settle_time(t, x, 0.0, 0.5) == math.inf


def test_sign_helpers():
    x = np.concatenate([np.zeros(5), [0.001, -0.001], np.linspace(0.1, 1, 10), -np.linspace(0.1, 1, 10)])
    assert count_sign_changes(x) == 1
    assert first_sign(x) == 1
    assert first_sign(-x) == -1
    assert first_sign(np.zeros(4)) == 0 and count_sign_changes(np.zeros(4)) == 0


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=60), st.floats(0.1, 100.0))
def test_sign_changes_scale_invariant(xs, k):
    x = np.asarray(xs)
    assert count_sign_changes(k * x) == count_sign_changes(x)
    assert count_sign_changes(-x) == count_sign_changes(x)
    assert first_sign(-x) == -first_sign(x)


def test_emit_plot_data(tmp_path):
    log = _log(10, v=np.arange(10.0), thw=np.full(10, 2.0))
    p = emit_plot_data(log, ["thw", "v"], tmp_path / "p.csv")
    lines = p.read_text().splitlines()
    assert lines[0] == "t,thw,v" and len(lines) == 11
    assert lines[3].split(",") == ["0.02", "2.0", "2.0"]
    with pytest.raises(CriterionError, match="available"):
        emit_plot_data(log, ["speed"], tmp_path / "q.csv")


def test_catalog_size():
    assert len(list(packaged_path("catalog").glob("*.json"))) == 13


def test_catalog_with_broken_file(tmp_path):
    src = packaged_path("catalog")
    for name in ("01_following.json", "09_target_point.json"):
        shutil.copy(src / name, tmp_path / name)
    (tmp_path / "00_broken.json").write_text('{"map": ')
    rep = run_catalog(tmp_path, out_dir=tmp_path / "out")
    assert [e.scenario for e in rep.entries] == ["00_broken", "following", "target_point"]
    assert rep.entries[0].error.startswith("load failed")
    assert rep.entries[1].passed and rep.entries[2].passed
    assert not rep.passed
    saved = json.loads((tmp_path / "out" / "report.json").read_text())
    assert saved["count"] == 3 and saved["passed"] == 2
    assert (tmp_path / "out" / "following" / "following_ego.csv").is_file()


def test_empty_catalog_warns(tmp_path):
    rep = run_catalog(tmp_path)
    assert rep.entries == [] and rep.warnings


def test_bench_inputs():
    with pytest.raises(ValueError):
        bench_scalability(agent_counts=(0, 1))
    sc = make_scenario([{"id": "c", "lane_id": "lane_0", "s": 10.0}])
    rep = replicate(sc, 3, spacing=100.0)
    assert [a.id for a in rep.agents] == ["c_0", "c_1", "c_2"]
    assert [a.s for a in rep.agents] == [10.0, 110.0, 210.0]
    with pytest.raises(ValueError):
        replicate(sc, 0)
    with pytest.raises(ValueError, match="too short"):
        replicate(sc, 20, spacing=100.0)


def test_linear_fit():
    a, b, r2 = linear_fit([1, 2, 3, 4], [3, 5, 7, 9])
    assert (a, b) == pytest.approx((1.0, 2.0)) and r2 == pytest.approx(1.0)
    x = np.arange(10.0)
    y = 0.5 + 0.1 * x + np.array([0.05, -0.05] * 5)
    a, b, r2 = linear_fit(x, y)
    ref_b, ref_a = np.polyfit(x, y, 1)
    assert (a, b) == pytest.approx((ref_a, ref_b))
    assert r2 == pytest.approx(np.corrcoef(x, y)[0, 1] ** 2)


def test_bench_small():
    res = bench_scalability(agent_counts=(1, 2), duration=2.0, isolate=False)
    assert [r.n for r in res.rows] == [1, 2]
    assert all(r.real_time_factor > 0 for r in res.rows)
    assert "R^2" in res.table()
