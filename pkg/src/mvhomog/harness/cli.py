"""Command-line entry point: ``mvhomog <command> --config cfg.json --out dir``."""

from __future__ import annotations

import argparse
import sys
import time

from .config import ConfigError, ExperimentConfig
from .experiments import COMMANDS
from .report import write_report


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be a comma-separated list of integers: {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvhomog", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="experiment config (JSON)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seeds", type=_seeds, help="override the config's seed list, e.g. 0,1,2")
        sp.add_argument("--threads", type=int, default=1, help="worker threads for independent runs")
        sp.add_argument("--no-figures", action="store_true", help="write plot data only")
        if name in ("fluctuation", "moments"):
            sp.add_argument("--p", type=int, help="moment order (default: config value)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = ExperimentConfig.load(args.config)
        if args.seeds:
            data = config.to_dict()
            data["seeds"] = args.seeds
            config = ExperimentConfig.from_dict(data)
        kw = {"threads": max(1, args.threads)}
        if getattr(args, "p", None) is not None:
            kw["p"] = args.p
        start = time.perf_counter()
        report = COMMANDS[args.command](config, **kw)
        write_report(report, args.out, figures=not args.no_figures)
    except (ConfigError, ValueError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    elapsed = time.perf_counter() - start
    print("=" * 72)
    print(f"{args.command}: {len(report.verdicts)} verdicts, {elapsed:.1f}s, output in {args.out}")
    for v in report.verdicts:
        tag = "PASS" if v.passed else "FAIL"
        if v.degenerate:
            tag += " (degenerate)"
        print(f"  [{tag}] {v.name}: statistic={v.statistic:.6g} threshold={v.threshold:.6g}")
    print("=" * 72)
    return 0 if report.passed else 2


if __name__ == "__main__":
    sys.exit(main())
