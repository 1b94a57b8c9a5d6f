"""Command-line entry point: ``simulate``, ``run`` and ``plot``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .panel import StudyConfig, parse_variants
from .pipeline import RunReport, StageError, run_pipeline, simulate_command, write_plot

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_STAGE = 3


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated years, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="matchsynth", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="write an oracle panel from a DGP spec file")
    sim.add_argument("--spec", required=True, type=Path)
    sim.add_argument("--seed", required=True, type=int)
    sim.add_argument("--out", required=True, type=Path)

    run = sub.add_parser("run", help="run the study pipeline")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--panel", required=True, type=Path)
    run.add_argument("--covariates", required=True, type=Path)
    run.add_argument("--price", type=Path, help="CSV with year,price_usd_per_kg for the trends overlay")
    run.add_argument("--out", required=True, type=Path)
    run.add_argument("--stages", help="comma-separated subset of match,estimate,inference,heterogeneity")
    run.add_argument("--k", type=int, help="donors matched per treated unit")
    run.add_argument("--metric", choices=("euclidean", "mahalanobis"))
    run.add_argument("--no-audit", action="store_true", help="disable the dry-donor screen")
    run.add_argument("--exclude-file", type=Path, help="donor ids to exclude, one per line")
    run.add_argument("--placebo-years", type=_int_list)
    run.add_argument("--robustness", help="variants such as 'k=1;audit=off'")

    plot = sub.add_parser("plot", help="write figure data (CSV) and a PNG from a report")
    plot.add_argument("--report", required=True, type=Path)
    plot.add_argument("--figure", required=True)
    plot.add_argument("--out", required=True, type=Path)
    return parser


def _config(args) -> StudyConfig:
    cfg = StudyConfig.from_file(args.config)
    changes = {}
    if args.k is not None:
        changes["k"] = args.k
    if args.metric is not None:
        changes["metric"] = args.metric
    if args.no_audit:
        changes["audit"] = False
    if args.exclude_file is not None:
        lines = args.exclude_file.read_text(encoding="utf-8").splitlines()
        ids = [ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]
        changes["exclude"] = tuple(cfg.exclude) + tuple(ids)
    if args.placebo_years is not None:
        changes["placebo_years"] = args.placebo_years
    if args.robustness is not None:
        changes["robustness"] = parse_variants(args.robustness)
    return cfg.with_overrides(**changes) if changes else cfg


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "simulate":
            paths = simulate_command(args.spec, args.seed, args.out)
            for p in paths.values():
                print(p)
        elif args.command == "run":
            report = run_pipeline(_config(args), args.panel, args.covariates, args.out, args.stages,
                                  args.price, config_path=args.config)
            for p in report.files:
                print(p)
        else:
            for p in write_plot(RunReport.load(args.report), args.figure, args.out):
                print(p)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
