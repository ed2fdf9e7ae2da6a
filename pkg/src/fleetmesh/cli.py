"""Command line entry point: replay a scenario file, write trace, metrics
and optional figures, exit 0 only if every expectation held."""

import argparse
import os
import sys
from importlib import resources

from .runner import SinkUnavailable, emit_trace, metrics_block, run_scenario
from .scenario import ScenarioError, load_scenario

EXIT_OK = 0
EXIT_ASSERTION = 1
EXIT_ERROR = 2


def _resolve(path: str) -> str:
    """A bare name with no path separator resolves to a packaged fixture."""
    if os.path.exists(path):
        return path
    if os.sep not in path and "/" not in path:
        name = path if path.endswith(".scn") else path + ".scn"
        ref = resources.files("fleetmesh").joinpath("scenarios", name)
        if ref.is_file():
            return str(ref)
    return path


def _default_trace_dir() -> str:
    return os.environ.get("FLEETMESH_TRACE_DIR", ".")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fleetmesh",
        description="Replay declarative fleet scenarios over the simulated "
                    "vehicle/edge/cloud network.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one scenario file")
    run.add_argument("scenario", help="scenario file path, or the name of a packaged fixture")
    run.add_argument("--seed", type=int, default=0, help="simulation seed (default 0)")
    run.add_argument("--trace", help="trace output path (default <dir>/<name>.trace)")
    run.add_argument("--metrics", help="metrics output path (name=value lines)")
    run.add_argument("--figures", nargs="?", const="", metavar="DIR",
                     help="render PNG figures (default: next to the trace)")
    run.add_argument("--quiet", action="store_true", help="suppress the summary")
    return parser


def _run(args) -> int:
    path = _resolve(args.scenario)
    try:
        scenario = load_scenario(path)
    except FileNotFoundError:
        print(f"error: no such scenario: {args.scenario}", file=sys.stderr)
        return EXIT_ERROR
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR

    try:
        report = run_scenario(scenario, args.seed)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR

    trace_path = args.trace or os.path.join(_default_trace_dir(), f"{scenario.name}.trace")
    try:
        emit_trace(report, trace_path)
        if args.metrics:
            os.makedirs(os.path.dirname(os.path.abspath(args.metrics)), exist_ok=True)
            with open(args.metrics, "w", encoding="utf-8") as fh:
                fh.write(metrics_block(report))
    except (SinkUnavailable, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR

    figure_paths = []
    if args.figures is not None:
        from .figures import render_figures
        fig_dir = args.figures or os.path.dirname(os.path.abspath(trace_path))
        figure_paths = render_figures(report, fig_dir)

    if not args.quiet:
        print(f"scenario {report.scenario} seed {report.seed} "
              f"hash {report.trace_hash:016x} trace {trace_path}")
        for name in sorted(report.metrics):
            print(f"  {name}={report.metrics[name]}")
        for fig in figure_paths:
            print(f"  figure {fig}")
        for failure in report.failures:
            print(f"FAILED: {failure}")
        if not report.failures and scenario.expectations:
            print(f"all {len(scenario.expectations)} expectations hold")
    return EXIT_OK if report.ok else EXIT_ASSERTION


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return _run(args)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
