"""Metrics, pass/fail criteria, the scenario catalog and the scalability bench."""

from __future__ import annotations

import json
import math
import multiprocessing
import operator
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from agentsim.messages import AcquireGlobalPosition
from agentsim.simcore import (
    LOG_CHANNELS, Scenario, ScenarioError, SimulationLog, load_scenario, packaged_path, run,
)

SETTLE_FRACTION = 0.2
ONSET_ACCEL = -0.05
ONSET_HOLD = 0.5
SIGN_DEADBAND = 0.05

METRICS = (
    "min_thw", "max_abs_accel", "max_lat_accel", "max_lat_deviation", "max_yaw_offset",
    "collision_count", "goal_reached", "settle_value", "settle_time", "onset_lead_time",
    "duration_between_events",
    # generic helpers used by the catalog
    "min_value", "max_value", "mean_value", "value_at", "sign_changes", "first_sign",
)
_CHANNEL_METRICS = {"settle_value", "settle_time", "min_value", "max_value", "mean_value",
                    "value_at", "sign_changes", "first_sign"}
_OPS = {"<=": operator.le, "<": operator.lt, ">=": operator.ge, ">": operator.gt,
        "==": operator.eq}


class CriterionError(ValueError):
    pass


@dataclass(frozen=True)
class Criterion:
    """One bounded metric.

    ``op`` is a comparator from ``<=, <, >=, >, ==`` with a scalar
    ``value``, or ``between`` with a ``[lo, hi]`` pair (inclusive).
    ``window`` limits the samples in time; each end is a number, an event
    kind (first occurrence for that agent) or None. ``s_window`` limits
    them by route position.
    """

    metric: str
    op: str
    value: Any
    agent: Optional[str] = None
    channel: Optional[str] = None
    window: Optional[tuple] = None
    s_window: Optional[tuple] = None
    reference: Optional[dict] = None
    start_event: Optional[str] = None
    end_event: Optional[str] = None
    tolerance: Optional[float] = None
    name: Optional[str] = None

    def __post_init__(self):
        if self.metric not in METRICS:
            raise CriterionError(f"unknown metric {self.metric!r}")
        if self.op == "between":
            lo, hi = self.value
            if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
                raise CriterionError(f"{self.label}: 'between' needs finite lo <= hi")
        elif self.op in _OPS:
            if not math.isfinite(self.value):
                raise CriterionError(f"{self.label}: threshold must be finite")
        else:
            raise CriterionError(f"{self.label}: unknown comparator {self.op!r}")
        if self.metric in _CHANNEL_METRICS and self.channel is None:
            raise CriterionError(f"{self.label}: metric needs a 'channel'")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        what = f"{self.metric}({self.channel})" if self.channel else self.metric
        return f"{what}[{self.agent}]" if self.agent else what

    @classmethod
    def from_dict(cls, d: dict) -> "Criterion":
        if not isinstance(d, dict) or "metric" not in d:
            raise CriterionError("criterion must be an object with a 'metric'")
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise CriterionError(f"unknown criterion field(s) {sorted(unknown)}")
        kw = dict(d)
        for key in ("window", "s_window", "value"):
            if isinstance(kw.get(key), list):
                kw[key] = tuple(kw[key])
        kw.setdefault("op", "<=")
        if "value" not in kw:
            raise CriterionError(f"{d['metric']}: missing 'value'")
        return cls(**kw)

    def to_dict(self) -> dict:
        out = {}
        for k in self.__dataclass_fields__:
            v = getattr(self, k)
            if v is not None:
                out[k] = list(v) if isinstance(v, tuple) else v
        return out

    def check(self, measured: float) -> bool:
        if measured is None or (isinstance(measured, float) and math.isnan(measured)):
            return False
        if self.op == "between":
            return self.value[0] <= measured <= self.value[1]
        return bool(_OPS[self.op](measured, self.value))


@dataclass(frozen=True)
class CriterionResult:
    criterion: Criterion
    measured: Optional[float]
    passed: bool
    error: Optional[str] = None

    def to_dict(self) -> dict:
        m = self.measured
        return {"criterion": self.criterion.label, "spec": self.criterion.to_dict(),
                "measured": None if m is None or not math.isfinite(m) else m,
                "passed": self.passed, "error": self.error}


@dataclass
class TestReport:
    scenario: str
    results: list = field(default_factory=list)
    artifacts: list = field(default_factory=list)
    wall_time: Optional[float] = None
    error: Optional[str] = None

    __test__ = False  # not a pytest class

    @property
    def passed(self) -> bool:
        return self.error is None and all(r.passed for r in self.results)

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "verdict": "pass" if self.passed else "fail",
                "error": self.error, "wall_time": self.wall_time,
                "results": [r.to_dict() for r in self.results],
                "artifacts": [str(p) for p in self.artifacts]}


# -- metric helpers -----------------------------------------------------------

def _first_event_time(log: SimulationLog, kind: str, agent: Optional[str]) -> Optional[float]:
    for e in log.events:
        if e.kind == kind and (agent is None or agent in e.agents):
            return e.t
    return None


def _crossing_time(t: np.ndarray, s: np.ndarray, target: float) -> Optional[float]:
    """First time the (increasing) position reaches ``target``, interpolated."""
    idx = np.nonzero(s >= target)[0]
    if not len(idx):
        return None
    i = int(idx[0])
    if i == 0:
        return float(t[0])
    s0, s1 = s[i - 1], s[i]
    w = (target - s0) / (s1 - s0) if s1 > s0 else 1.0
    return float(t[i - 1] + w * (t[i] - t[i - 1]))


def _resolve_time(log: SimulationLog, ref, agent: str) -> Optional[float]:
    if ref is None or isinstance(ref, (int, float)):
        return ref
    if isinstance(ref, str):
        return _first_event_time(log, ref, agent)
    if isinstance(ref, dict):
        tr = log.agents[agent]
        if "event" in ref:
            return _first_event_time(log, ref["event"], agent)
        for ch in ("route_s", "s"):
            if ch in ref:
                return _crossing_time(tr["t"], tr[ch], float(ref[ch]))
        if "t" in ref:
            return float(ref["t"])
    raise CriterionError(f"cannot resolve time reference {ref!r}")


def _mask(log: SimulationLog, c: Criterion, agent: str) -> np.ndarray:
    tr = log.agents[agent]
    t = tr["t"]
    m = np.ones(len(t), dtype=bool)
    if c.window is not None:
        lo, hi = (_resolve_time(log, x, agent) for x in c.window)
        if (c.window[0] is not None and lo is None) or (c.window[1] is not None and hi is None):
            raise CriterionError(f"window event {c.window} did not occur")
        if lo is not None:
            m &= t >= lo - 1e-9
        if hi is not None:
            m &= t <= hi + 1e-9
    if c.s_window is not None:
        s = tr["route_s"]
        lo, hi = c.s_window
        if lo is not None:
            m &= s >= lo
        if hi is not None:
            m &= s <= hi
    return m


def sustained_onset(t: np.ndarray, a: np.ndarray, threshold: float = ONSET_ACCEL,
                    hold: float = ONSET_HOLD) -> Optional[float]:
    """Start of the first run with ``a < threshold`` lasting at least ``hold`` seconds."""
    below = a < threshold
    start = None
    for i in range(len(t)):
        if below[i]:
            if start is None:
                start = i
            if t[i] - t[start] >= hold - 1e-9:
                return float(t[start])
        else:
            start = None
    return None


def count_sign_changes(x: np.ndarray, deadband: float = SIGN_DEADBAND) -> int:
    """Sign changes of ``x`` ignoring samples below ``deadband * max|x|``."""
    x = np.asarray(x, dtype=float)
    x = x[np.isfinite(x)]
    if not len(x):
        return 0
    peak = np.abs(x).max()
    if peak == 0:
        return 0
    sig = np.sign(x[np.abs(x) > deadband * peak])
    return int(np.count_nonzero(np.diff(sig)))


def first_sign(x: np.ndarray, deadband: float = SIGN_DEADBAND) -> int:
    """Sign (+1/-1) of the first sample above ``deadband * max|x|``; 0 if none."""
    x = np.asarray(x, dtype=float)
    x = x[np.isfinite(x)]
    if not len(x) or np.abs(x).max() == 0:
        return 0
    big = x[np.abs(x) > deadband * np.abs(x).max()]
    return int(np.sign(big[0]))


def lateral_acceleration(t: np.ndarray, v: np.ndarray, yaw: np.ndarray) -> np.ndarray:
    """Realized lateral acceleration ``v * yaw_rate`` from the logged pose."""
    if len(t) < 2:
        return np.zeros_like(v)
    rate = np.gradient(np.unwrap(yaw), t)
    return v * rate


def settle_time(t: np.ndarray, x: np.ndarray, target: float, tol: float) -> float:
    """Earliest time after which ``x`` stays within ``target +- tol``."""
    outside = np.nonzero(np.abs(x - target) > tol)[0]
    if not len(outside):
        return float(t[0])
    last = int(outside[-1])
    if last == len(t) - 1:
        return math.inf
    return float(t[last + 1])


# -- evaluation ---------------------------------------------------------------

def _finite(x: np.ndarray) -> np.ndarray:
    return x[np.isfinite(x)]


def _agents_for(log: SimulationLog, c: Criterion, default: Optional[str]) -> list[str]:
    if c.agent == "*":
        return sorted(log.agents)
    agent = c.agent or default
    if agent not in log.agents:
        raise CriterionError(f"unknown agent {agent!r}")
    return [agent]


def measure(log: SimulationLog, c: Criterion, default_agent: Optional[str] = None,
            goal_agents: Optional[set] = None) -> float:
    """Value of a criterion's metric on a log; raises CriterionError."""
    if c.metric == "collision_count":
        evs = log.events_of("collision")
        if c.agent not in (None, "*"):
            evs = [e for e in evs if c.agent in e.agents]
        return float(len(evs))
    if c.metric == "goal_reached":
        agents = _agents_for(log, c, default_agent)
        if c.agent == "*" and goal_agents is not None:
            agents = sorted(goal_agents)
        if not agents:
            return 1.0
        reached = {e.agents[0] for e in log.events_of("goal_reached")}
        return sum(a in reached for a in agents) / len(agents)
    if c.metric == "duration_between_events":
        agent = c.agent or default_agent
        if not c.start_event or not c.end_event:
            raise CriterionError("duration_between_events needs start_event and end_event")
        t0 = _first_event_time(log, c.start_event, agent)
        t1 = _first_event_time(log, c.end_event, agent)
        if t0 is None or t1 is None:
            raise CriterionError(f"event {c.start_event if t0 is None else c.end_event!r} did not occur")
        return t1 - t0

    values = []
    for agent in _agents_for(log, c, default_agent):
        values.append(_measure_agent(log, c, agent))
    reduce = min if c.metric in ("min_thw", "min_value") else max
    if c.metric in ("settle_value", "mean_value", "value_at", "settle_time", "onset_lead_time"):
        if len(values) != 1:
            raise CriterionError(f"{c.metric} needs a single agent")
    return reduce(values)


def _channel(log: SimulationLog, agent: str, name: str) -> np.ndarray:
    if name == "lat_accel":
        tr = log.agents[agent]
        return lateral_acceleration(tr["t"], tr["v"], tr["yaw"])
    if name not in LOG_CHANNELS:
        raise CriterionError(f"unknown channel {name!r}; available: {', '.join(LOG_CHANNELS)}")
    return log.agents[agent][name]


def _measure_agent(log: SimulationLog, c: Criterion, agent: str) -> float:
    tr = log.agents[agent]
    if len(tr) == 0:
        raise CriterionError(f"agent {agent!r} has no samples")
    m = _mask(log, c, agent)
    t = tr["t"][m]
    if not len(t):
        raise CriterionError("window selects no samples")
    metric = c.metric
    if metric == "min_thw":
        x = _finite(tr["thw"][m])
        return float(x.min()) if len(x) else math.inf
    if metric == "max_abs_accel":
        return float(np.abs(tr["a"][m]).max())
    if metric == "max_lat_accel":
        return float(np.abs(_channel(log, agent, "lat_accel")[m]).max())
    if metric == "max_lat_deviation":
        return float(np.abs(tr["d"][m]).max())
    if metric == "max_yaw_offset":
        return float(np.abs(_finite(tr["yaw_offset"][m])).max())
    if metric == "onset_lead_time":
        t_ref = _resolve_time(log, c.reference, agent)
        if t_ref is None:
            raise CriterionError(f"reference {c.reference!r} not reached")
        onset = sustained_onset(t, tr["a"][m])
        if onset is None:
            raise CriterionError("no sustained deceleration found")
        return t_ref - onset

    x = _channel(log, agent, c.channel)[m]
    if metric == "settle_value":
        n = max(int(math.ceil(SETTLE_FRACTION * len(x))), 1)
        tail = _finite(x[-n:])
        return float(tail.mean()) if len(tail) else math.nan
    if metric == "settle_time":
        n = max(int(math.ceil(SETTLE_FRACTION * len(x))), 1)
        target = float(np.nanmean(x[-n:]))
        tol = c.tolerance if c.tolerance is not None else 0.05 * abs(target)
        return settle_time(t, x, target, tol)
    if metric == "min_value":
        return float(np.nanmin(x))
    if metric == "max_value":
        return float(np.nanmax(x))
    if metric == "mean_value":
        return float(np.nanmean(x))
    if metric == "value_at":
        t_ref = _resolve_time(log, c.reference, agent)
        if t_ref is None:
            raise CriterionError(f"reference {c.reference!r} not reached")
        return float(np.interp(t_ref, t, x))
    if metric == "sign_changes":
        return float(count_sign_changes(x, c.tolerance if c.tolerance is not None else SIGN_DEADBAND))
    if metric == "first_sign":
        return float(first_sign(x, c.tolerance if c.tolerance is not None else SIGN_DEADBAND))
    raise CriterionError(f"metric {metric!r} not implemented")  # pragma: no cover


def evaluate(log: SimulationLog, criteria: Sequence, scenario: Optional[Scenario] = None) -> TestReport:
    """Score a log against criteria; errors become failed entries."""
    default = None
    goal_agents = None
    if scenario is not None and scenario.agents:
        default = scenario.agents[0].id
        goal_agents = {a.id for a in scenario.agents if any(
            isinstance(act, AcquireGlobalPosition) for cmd in a.commands for act in cmd.command.actions)}
    elif log.agents:
        default = "ego" if "ego" in log.agents else sorted(log.agents)[0]
    report = TestReport(log.scenario)
    if log.aborted:
        report.error = f"run aborted: {log.aborted}"
    for raw in criteria:
        try:
            c = raw if isinstance(raw, Criterion) else Criterion.from_dict(raw)
        except (CriterionError, TypeError, ValueError) as exc:
            label = raw.get("metric", "?") if isinstance(raw, dict) else str(raw)
            c = _placeholder(label)
            report.results.append(CriterionResult(c, None, False, str(exc)))
            continue
        try:
            value = measure(log, c, default, goal_agents)
        except (CriterionError, KeyError) as exc:
            report.results.append(CriterionResult(c, None, False, str(exc)))
            continue
        report.results.append(CriterionResult(c, value, c.check(value)))
    return report


def _placeholder(label: str) -> Criterion:
    return Criterion("collision_count", "<=", 0.0, name=f"invalid criterion: {label}")


# -- plot data ----------------------------------------------------------------

FIGURE_PAIRS = {
    "following": ("thw", "a"),
    "speed": ("v", "a_des"),
    "lane_change": ("d", "kappa_des"),
    "curve": ("v", "v_T_pred"),
}


def emit_plot_data(log: SimulationLog, channels: Sequence[str], path, agent: Optional[str] = None) -> Path:
    """CSV with ``t`` and the requested channels of one agent."""
    if agent is None:
        agent = "ego" if "ego" in log.agents else sorted(log.agents)[0]
    if agent not in log.agents:
        raise CriterionError(f"unknown agent {agent!r}")
    avail = set(LOG_CHANNELS) | {"lat_accel"}
    bad = [c for c in channels if c not in avail]
    if bad:
        raise CriterionError(f"unknown channel(s) {bad}; available: {', '.join(sorted(avail))}")
    cols = [log.agents[agent]["t"]] + [_channel(log, agent, c) for c in channels]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as f:
        f.write(",".join(["t", *channels]) + "\n")
        for row in zip(*cols):
            f.write(",".join(repr(float(v)) for v in row) + "\n")
    return path


# -- scenario runs and catalog -----------------------------------------------

def run_scenario(scenario: Scenario, out_dir=None, plots: bool = True) -> tuple[SimulationLog, TestReport]:
    """Run, evaluate and optionally write logs and plot data."""
    t0 = time.perf_counter()
    log = run(scenario)
    wall = time.perf_counter() - t0
    report = evaluate(log, scenario.criteria, scenario)
    report.wall_time = wall
    if out_dir is not None:
        out = Path(out_dir)
        report.artifacts += log.write(out)
        if plots:
            raw = scenario.raw or {}
            for fig in raw.get("plots", []):
                chans = FIGURE_PAIRS.get(fig, None) or tuple(fig)
                tag = fig if isinstance(fig, str) else "_".join(fig)
                report.artifacts.append(emit_plot_data(log, chans, out / f"{scenario.name}_plot_{tag}.csv",
                                                       raw.get("plot_agent")))
    return log, report


@dataclass
class CatalogReport:
    entries: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def to_dict(self) -> dict:
        return {"verdict": "pass" if self.passed else "fail", "count": len(self.entries),
                "passed": sum(e.passed for e in self.entries),
                "warnings": list(self.warnings), "entries": [e.to_dict() for e in self.entries]}


def _catalog_entry(args) -> TestReport:
    path, out_dir = args
    try:
        sc = load_scenario(path)
    except ScenarioError as exc:
        return TestReport(Path(path).stem, error=f"load failed: {exc}")
    _, report = run_scenario(sc, Path(out_dir) / sc.name if out_dir else None)
    return report


def run_catalog(catalog_dir=None, out_dir=None, processes: int = 1) -> CatalogReport:
    """Run every ``*.json`` scenario in a directory (sorted by name)."""
    catalog_dir = Path(catalog_dir) if catalog_dir is not None else packaged_path("catalog")
    report = CatalogReport()
    if not catalog_dir.is_dir():
        raise FileNotFoundError(f"catalog directory {catalog_dir} not found")
    files = sorted(catalog_dir.glob("*.json"))
    if not files:
        report.warnings.append(f"no scenarios in {catalog_dir}")
        return report
    jobs = [(str(p), str(out_dir) if out_dir else None) for p in files]
    if processes > 1:
        with multiprocessing.get_context("spawn").Pool(processes) as pool:
            report.entries = pool.map(_catalog_entry, jobs)
    else:
        report.entries = [_catalog_entry(j) for j in jobs]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1))
    return report


# -- scalability bench --------------------------------------------------------

@dataclass(frozen=True)
class BenchRow:
    n: int
    wall_time: float
    peak_memory_mb: Optional[float]
    real_time_factor: float


@dataclass
class BenchResult:
    rows: list
    alpha: float
    beta: float
    r2: float

    def to_dict(self) -> dict:
        return {"fit": {"alpha": self.alpha, "beta": self.beta, "r2": self.r2},
                "rows": [r.__dict__ for r in self.rows]}

    def table(self) -> str:
        lines = [f"{'n':>4} {'wall[s]':>9} {'peak[MB]':>9} {'RTF':>8}"]
        for r in self.rows:
            mem = f"{r.peak_memory_mb:9.1f}" if r.peak_memory_mb is not None else f"{'n/a':>9}"
            lines.append(f"{r.n:>4} {r.wall_time:9.3f} {mem} {r.real_time_factor:8.2f}")
        lines.append(f"fit: wall = {self.alpha:.3f} + {self.beta:.4f} n  (R^2 = {self.r2:.4f})")
        return "\n".join(lines)


def replicate(scenario: Scenario, n: int, spacing: float = 150.0) -> Scenario:
    """``n`` copies of the scenario's agents, shifted ``spacing`` meters along their lanes."""
    if n < 1:
        raise ValueError("agent count must be >= 1")
    agents = []
    for k in range(n):
        for a in scenario.agents:
            lane = scenario.map.lanes[a.lane_id]
            s = a.s + k * spacing
            if s > lane.length:
                raise ValueError(f"lane {a.lane_id} too short for {n} replicas at {spacing} m")
            agents.append(replace(a, id=f"{a.id}_{k}", s=s, commands=list(a.commands)))
    return replace(scenario, agents=agents, name=f"{scenario.name}_x{n}")


def linear_fit(x: Sequence[float], y: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares ``y = alpha + beta x`` and its R^2."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    A = np.column_stack((np.ones_like(x), x))
    (alpha, beta), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (alpha + beta * x)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(alpha), float(beta), r2


def _peak_rss_mb() -> Optional[float]:
    try:
        import resource
    except ImportError:  # not on this platform
        return None
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def _bench_once(args) -> tuple[float, Optional[float]]:
    path, n, spacing, duration = args
    sc = load_scenario(path)
    if duration is not None:
        sc = replace(sc, duration=duration)
    sc = replicate(sc, n, spacing)
    t0 = time.perf_counter()
    run(sc)
    return time.perf_counter() - t0, _peak_rss_mb()


def bench_scalability(base_scenario=None, agent_counts: Sequence[int] = (1, 5, 10, 20, 40),
                      spacing: float = 150.0, duration: Optional[float] = None,
                      isolate: bool = True) -> BenchResult:
    """Wall time and peak memory against agent count, with a linear fit.

    With ``isolate`` each count runs in a fresh process so the peak
    resident memory belongs to that run alone.
    """
    if not agent_counts or any(int(n) < 1 for n in agent_counts):
        raise ValueError("agent counts must be >= 1")
    path = str(base_scenario) if base_scenario is not None else str(packaged_path("scenarios", "bench_base.json"))
    sim_duration = duration if duration is not None else load_scenario(path).duration
    rows = []
    for n in agent_counts:
        job = (path, int(n), spacing, duration)
        if isolate:
            with multiprocessing.get_context("spawn").Pool(1) as pool:
                wall, mem = pool.apply(_bench_once, (job,))
        else:
            wall, mem = _bench_once(job)
            mem = None  # process-wide peak would mix runs
        rows.append(BenchRow(int(n), wall, mem, sim_duration / wall))
    alpha, beta, r2 = linear_fit([r.n for r in rows], [r.wall_time for r in rows])
    return BenchResult(rows, alpha, beta, r2)


__all__ = [
    "Criterion", "CriterionError", "CriterionResult", "TestReport", "CatalogReport", "BenchRow",
    "BenchResult", "evaluate", "measure", "run_scenario", "run_catalog", "bench_scalability",
    "replicate", "linear_fit", "emit_plot_data", "sustained_onset", "count_sign_changes",
    "settle_time", "first_sign", "lateral_acceleration",
]
