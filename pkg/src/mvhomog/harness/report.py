"""Run reports and their on-disk form."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class Verdict:
    name: str
    passed: bool
    statistic: float
    threshold: float
    detail: str = ""
    degenerate: bool = False

    def to_dict(self):
        return {"name": self.name, "passed": bool(self.passed), "statistic": _num(self.statistic),
                "threshold": _num(self.threshold), "detail": self.detail,
                "degenerate": self.degenerate}


@dataclass
class Series:
    """One figure's worth of plot data: a shared x column and named y columns."""

    title: str
    xlabel: str
    ylabel: str
    x: list
    columns: dict
    errors: dict = field(default_factory=dict)
    logx: bool = False
    logy: bool = False


@dataclass
class RunReport:
    experiment: str
    rows: list = field(default_factory=list)  # (experiment, epsilon, statistic, value, se)
    verdicts: list = field(default_factory=list)
    series: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def add_row(self, epsilon, statistic: str, value, se):
        self.rows.append((self.experiment, float(epsilon), statistic, float(value), float(se)))

    def add_verdict(self, *args, **kw) -> Verdict:
        v = Verdict(*args, **kw)
        self.verdicts.append(v)
        return v

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts)


def _num(v):
    if v is None:
        return None
    v = float(v)
    return v if np.isfinite(v) else str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return _num(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_report(report: RunReport, output_dir, figures: bool = True) -> list[Path]:
    """Write results.csv, summary.json, plotdata/*.csv and (optionally) figures/*.png."""
    out = Path(output_dir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        path = out / "results.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["experiment", "epsilon", "statistic", "value", "se"])
            for row in report.rows:
                w.writerow([_fmt(v) for v in row])
        written.append(path)

        summary = {"experiment": report.experiment, "passed": report.passed,
                   "verdicts": [v.to_dict() for v in report.verdicts],
                   "details": _jsonable(report.details),
                   "diagnostics": _jsonable(report.diagnostics),
                   "provenance": _jsonable(report.provenance)}
        path = out / "summary.json"
        with open(path, "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
        written.append(path)

        if report.series:
            (out / "plotdata").mkdir(exist_ok=True)
        for name, s in sorted(report.series.items()):
            path = out / "plotdata" / f"{name}.csv"
            cols = sorted(s.columns)
            errs = sorted(s.errors)
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow([s.xlabel] + cols + [f"{c}_se" for c in errs])
                for i, xv in enumerate(s.x):
                    w.writerow([_fmt(xv)] + [_fmt(s.columns[c][i]) for c in cols]
                               + [_fmt(s.errors[c][i]) for c in errs])
            written.append(path)
        if figures and report.series:
            from .plotting import render_series
            (out / "figures").mkdir(exist_ok=True)
            for name, s in sorted(report.series.items()):
                path = out / "figures" / f"{name}.png"
                render_series(s, path)
                written.append(path)
    except OSError as exc:
        raise OSError(f"cannot write report to {os.fspath(out)}: {exc}") from exc
    return written
