"""Command-line entry point: run, catalog, bench, genroad, validate.

Exit codes: 0 success or pass, 1 a criterion or check failed, 2 usage or
I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

from agentsim import __version__

log = logging.getLogger("agentsim")

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2

OUT_ENV = "AGENTSIM_OUT"
DEFAULT_OUT = "agentsim_out"


class UsageError(Exception):
    pass


@dataclass
class CliConfig:
    subcommand: str
    paths: list = field(default_factory=list)
    overrides: dict = field(default_factory=dict)
    out_dir: Optional[Path] = None
    verbosity: int = 0


def default_out_dir() -> Path:
    return Path(os.environ.get(OUT_ENV) or DEFAULT_OUT)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_overrides(items: Sequence[str]) -> dict:
    """``key=value`` strings to typed parameter values, checked against the descriptor."""
    from agentsim.host import UnknownName, load_descriptor

    desc = load_descriptor()
    out = {}
    for item in items:
        key, sep, text = item.partition("=")
        key = key.strip()
        if not sep or not key:
            raise UsageError(f"override {item!r} is not key=value")
        try:
            spec = desc.parameter(key)
        except UnknownName:
            raise UsageError(f"unknown parameter {key!r}; see 'agentsim validate --parameters'") from None
        try:
            if spec.type == "bool":
                value = _parse_bool(text)
            elif spec.type == "int":
                value = int(text)
            else:
                value = float(text)
        except ValueError:
            raise UsageError(f"override {key}: cannot parse {text!r} as {spec.type}") from None
        out[key] = value
    return out


def apply_overrides(scenario, overrides: dict):
    """Copy of the scenario with ``overrides`` applied to every agent (scenario values lose)."""
    if not overrides:
        return scenario
    agents = [replace(a, parameters={**a.parameters, **overrides}) for a in scenario.agents]
    return replace(scenario, agents=agents)


def _print_report(report) -> None:
    for r in report.results:
        status = "PASS" if r.passed else "FAIL"
        measured = "n/a" if r.measured is None else f"{r.measured:.4g}"
        bound = list(r.criterion.value) if isinstance(r.criterion.value, tuple) else r.criterion.value
        extra = f"  ({r.error})" if r.error else ""
        print(f"  [{status}] {r.criterion.label}: {measured} {r.criterion.op} {bound}{extra}")
    if report.error:
        print(f"  error: {report.error}")


# -- subcommands --------------------------------------------------------------

def cmd_run(args, cfg: CliConfig) -> int:
    from agentsim.simcore import ScenarioError, load_scenario
    from agentsim.testkit import run_scenario

    try:
        sc = load_scenario(args.scenario)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    sc = apply_overrides(sc, cfg.overrides)
    if args.duration is not None:
        sc = replace(sc, duration=args.duration)
    out = cfg.out_dir / sc.name
    _, report = run_scenario(sc, out, plots=not args.no_plots)
    verdict = "pass" if report.passed else "fail"
    print(f"{sc.name}: {verdict} ({len(report.results)} criteria, {report.wall_time:.2f} s wall)")
    _print_report(report)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1))
    log.info("wrote %d files to %s", len(report.artifacts) + 1, out)
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_catalog(args, cfg: CliConfig) -> int:
    from agentsim.testkit import run_catalog

    if args.processes < 1:
        raise UsageError("--processes must be >= 1")
    try:
        report = run_catalog(args.directory, cfg.out_dir, processes=args.processes)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    for e in report.entries:
        print(f"{'PASS' if e.passed else 'FAIL'} {e.scenario}")
        if cfg.verbosity > 0 or not e.passed:
            _print_report(e)
    n_pass = sum(e.passed for e in report.entries)
    print(f"{n_pass}/{len(report.entries)} scenarios passed; report in {cfg.out_dir / 'report.json'}")
    return EXIT_OK if report.passed else EXIT_FAIL


def _counts(text: str) -> list[int]:
    try:
        counts = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad agent counts {text!r}") from None
    if not counts or min(counts) < 1:
        raise argparse.ArgumentTypeError("agent counts must be positive")
    return counts


def cmd_bench(args, cfg: CliConfig) -> int:
    from agentsim.simcore import ScenarioError
    from agentsim.testkit import bench_scalability

    try:
        result = bench_scalability(args.scenario, args.counts, spacing=args.spacing,
                                   duration=args.duration, isolate=not args.no_isolate)
    except (ScenarioError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(result.table())
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.out_dir / "bench.json"
    path.write_text(json.dumps(result.to_dict(), indent=1))
    log.info("wrote %s", path)
    return EXIT_OK


def cmd_genroad(args, cfg: CliConfig) -> int:
    from agentsim.lanemap import MapError, generate_test_road, save_map

    try:
        m = generate_test_road(args.radius, args.spiral, args.line, lane_width=args.lane_width,
                               arc_len=args.arc, left=not args.right)
    except (MapError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    path = Path(args.output) if args.output else cfg.out_dir / f"road_r{args.radius:g}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_map(m, path)
    lane = next(iter(m.lanes.values()))
    print(f"wrote {path} (lane {lane.id}, length {lane.length:.1f} m)")
    return EXIT_OK


def _validate_one(path: Path) -> Optional[str]:
    """Error message for an invalid file, None when valid. Raises OSError."""
    from agentsim.lanemap import MapError, map_from_dict
    from agentsim.simcore import ScenarioError, scenario_from_dict
    from agentsim.host import load_descriptor
    from agentsim.testkit import Criterion, CriterionError

    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        return f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}"
    try:
        if isinstance(data, dict) and "lanes" in data:
            m = map_from_dict(data, str(path))
            print(f"ok   {path}: map, {len(m.lanes)} lanes")
            return None
        known = {p.name for p in load_descriptor().parameters}
        sc = scenario_from_dict(data, path.parent, str(path), known)
        for i, c in enumerate(sc.criteria):
            try:
                Criterion.from_dict(c)
            except (CriterionError, TypeError, ValueError) as exc:
                return f"{path}: criteria[{i}]: {exc}"
        print(f"ok   {path}: scenario, {len(sc.agents)} agents, {len(sc.criteria)} criteria")
        return None
    except (MapError, ScenarioError) as exc:
        return str(exc)


def cmd_validate(args, cfg: CliConfig) -> int:
    if args.parameters:
        from agentsim.host import load_descriptor
        for p in load_descriptor().parameters:
            print(f"{p.name:<24} {p.type:<5} {p.default!r:<10} {p.description}")
        if not args.files:
            return EXIT_OK
    if not args.files:
        raise UsageError("validate needs at least one file (or --parameters)")
    failed = False
    for name in args.files:
        path = Path(name)
        try:
            err = _validate_one(path)
        except OSError as exc:
            print(f"error: {path}: {exc.strerror}", file=sys.stderr)
            return EXIT_USAGE
        if err:
            failed = True
            print(f"FAIL {err}")
    return EXIT_FAIL if failed else EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0, help="more log output (repeatable)")
    common.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors")
    common.add_argument("-o", "--out", metavar="DIR",
                        help=f"output directory (default: ${OUT_ENV} or ./{DEFAULT_OUT})")

    p = argparse.ArgumentParser(prog="agentsim", description="Closed-loop traffic agent simulation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")
    sub.required = True

    r = sub.add_parser("run", parents=[common], help="run one scenario, write logs and plot data",
                       description="Run a scenario file, evaluate its criteria and write logs.")
    r.add_argument("scenario", help="scenario JSON file")
    r.add_argument("-s", "--set", action="append", default=[], metavar="KEY=VALUE",
                   help="parameter override for every agent (repeatable)")
    r.add_argument("--duration", type=float, help="override the scenario duration [s]")
    r.add_argument("--no-plots", action="store_true", help="skip the plot-data CSV files")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("catalog", parents=[common], help="run every scenario in a directory",
                       description="Run all *.json scenarios in a directory; exit 1 unless all pass.")
    c.add_argument("directory", nargs="?", help="catalog directory (default: packaged catalog)")
    c.add_argument("-j", "--processes", type=int, default=1, help="parallel worker processes")
    c.set_defaults(func=cmd_catalog)

    b = sub.add_parser("bench", parents=[common], help="wall time and memory against agent count",
                       description="Replicate a base scenario n times and time each run.")
    b.add_argument("--scenario", help="base scenario (default: packaged bench_base.json)")
    b.add_argument("--counts", type=_counts, default=[1, 5, 10, 20, 40], metavar="N,N,...",
                   help="agent counts (default: 1,5,10,20,40)")
    b.add_argument("--spacing", type=float, default=150.0, help="gap between replicas along the lane [m]")
    b.add_argument("--duration", type=float, help="override the simulated duration [s]")
    b.add_argument("--no-isolate", action="store_true",
                   help="run counts in this process (no per-run memory figure)")
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("genroad", parents=[common], help="write a line-spiral-arc test road map",
                       description="Generate a single-lane road: line, clothoid, arc, clothoid, line.")
    g.add_argument("--radius", type=float, required=True, help="arc radius [m]")
    g.add_argument("--spiral", type=float, required=True, help="clothoid length [m]")
    g.add_argument("--line", type=float, required=True, help="length of each straight [m]")
    g.add_argument("--arc", type=float, default=100.0, help="arc length [m] (default 100)")
    g.add_argument("--lane-width", type=float, default=3.5, help="lane width [m]")
    g.add_argument("--right", action="store_true", help="curve to the right (default left)")
    g.add_argument("--output", help="map file to write (default: OUT/road_r<radius>.json)")
    g.set_defaults(func=cmd_genroad)

    v = sub.add_parser("validate", parents=[common], help="check map and scenario files",
                       description="Load map or scenario files and report problems; exit 1 on any.")
    v.add_argument("files", nargs="*", help="map or scenario JSON files")
    v.add_argument("--parameters", action="store_true", help="list the tunable parameters")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING if args.quiet else (logging.INFO if args.verbose else logging.WARNING)
    if args.verbose > 1:
        level = logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    cfg = CliConfig(args.subcommand, verbosity=args.verbose,
                    out_dir=Path(args.out) if args.out else default_out_dir())
    try:
        cfg.overrides = parse_overrides(getattr(args, "set", []))
        return args.func(args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"agentsim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
