"""Command line entry point.

    stdmarg analyze --data trial.csv --config analysis.json [--out text|csv|json]
    stdmarg simulate --config sim.json [--threads N] [--out json|text]

Exit status is 0 on success, 2 for bad input or configuration and 3 when a
model fails to converge.
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import Optional, Sequence

from .cli_io import FORMATS, AnalysisConfig, analyze, load_dataset, render_report
from .errors import ConvergenceError, DataError, InvalidConfig
from .trial_sim import SimulationConfig, default_workers, run_simulation

EXIT_OK, EXIT_DATA, EXIT_CONVERGENCE = 0, 2, 3


def _read_json(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            body = json.load(fh)
    except OSError as exc:
        raise InvalidConfig(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(body, dict):
        raise InvalidConfig(f"config {path} must hold a JSON object")
    return body


def _analyze(args) -> bytes:
    config = AnalysisConfig.from_dict(_read_json(args.config))
    if config.schema is None:
        raise InvalidConfig("analysis config needs a 'columns' section")
    try:
        data = load_dataset(args.data, config.schema)
    except OSError as exc:
        raise InvalidConfig(f"cannot read data {args.data}: {exc.strerror}") from None
    return render_report(analyze(data, config), args.out)


def _simulate(args) -> bytes:
    workers = args.threads if args.threads is not None else default_workers()
    if workers < 1:
        raise InvalidConfig(f"thread count must be >= 1, got {workers}")
    config = SimulationConfig.from_dict(_read_json(args.config))
    report = run_simulation(config, workers=workers)
    return (report.to_json() if args.out == "json" else report.to_text()).encode()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stdmarg",
                                     description="Marginal mean estimation for randomized trials.")
    sub = parser.add_subparsers(dest="command", required=True)
    a = sub.add_parser("analyze", help="estimate arm-specific marginal means from a CSV file")
    a.add_argument("--data", required=True, help="CSV file with a header row")
    a.add_argument("--config", required=True, help="JSON analysis configuration")
    a.add_argument("--out", choices=FORMATS, default="text", help="output format")
    a.set_defaults(run=_analyze)
    s = sub.add_parser("simulate", help="run the Monte Carlo study")
    s.add_argument("--config", required=True, help="JSON simulation configuration")
    s.add_argument("--threads", type=int, default=None,
                   help="worker processes (default: $STDMARG_THREADS or 1)")
    s.add_argument("--out", choices=("json", "text"), default="json", help="output format")
    s.set_defaults(run=_simulate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        payload = args.run(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    sys.stdout.buffer.write(payload)
    sys.stdout.flush()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
