"""Forecast metrics, paired t-tests and the cross-approach comparison report."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import special

BASELINE = "HIST_AVG"


def _pair(actual, predicted) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(actual, dtype=float).ravel()
    p = np.asarray(predicted, dtype=float).ravel()
    if a.size != p.size:
        raise ValueError(f"length mismatch: {a.size} actual vs {p.size} predicted")
    if a.size == 0:
        raise ValueError("empty series")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(p))):
        raise ValueError("series contain non-finite values")
    return a, p


def rmse(actual, predicted) -> float:
    """Root mean squared error over the N samples."""
    a, p = _pair(actual, predicted)
    return math.sqrt(float(np.mean((a - p) ** 2)))


def mare(actual, predicted, return_excluded: bool = False):
    """Mean absolute error relative to the actual value, as a fraction.

    Samples with a zero actual are dropped; pass ``return_excluded=True`` to
    also get how many were dropped.  The ratios are accumulated exactly in
    rational arithmetic, so the result is the correctly rounded mean.
    """
    a, p = _pair(actual, predicted)
    keep = a != 0
    if not keep.any():
        raise ValueError("all actual values are zero")
    total = sum(abs(Fraction(x) - Fraction(y)) / abs(Fraction(x))
                for x, y in zip(a[keep].tolist(), p[keep].tolist()))
    value = float(total / int(keep.sum()))
    if return_excluded:
        return value, int(a.size - keep.sum())
    return value


@dataclass(frozen=True)
class MetricRow:
    link: str
    approach: str
    rmse: float
    mare: float
    mare_excluded: int = 0


@dataclass(frozen=True)
class TTestResult:
    pair: tuple[str, str]
    t: float
    df: int
    p: float
    degenerate: str = ""  # "zero_variance" or "identical" when the usual statistic is undefined


def t_two_sided_p(t: float, df: float) -> float:
    """Two-tailed Student-t p-value via the regularised incomplete beta function."""
    if math.isinf(t):
        return 0.0
    return float(special.betainc(0.5 * df, 0.5, df / (df + t * t)))


def paired_ttest(a: Sequence[float], b: Sequence[float], names: tuple[str, str] = ("A", "B")) -> TTestResult:
    """Two-tailed paired t-test on ``a - b``."""
    x = np.asarray(a, dtype=float)
    y = np.asarray(b, dtype=float)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("paired t-test needs two equal-length samples of size >= 2")
    d = x - y
    n = d.size
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(names, 0.0, n - 1, 1.0, "identical")
        return TTestResult(names, math.copysign(math.inf, mean), n - 1, 0.0, "zero_variance")
    t = mean / (sd / math.sqrt(n))
    return TTestResult(names, t, n - 1, t_two_sided_p(t, n - 1))


@dataclass
class ComparisonReport:
    approaches: list[str]
    links: list[str]
    rows: list[MetricRow]
    rmse_sums: dict[str, float]
    ttests: list[TTestResult]
    wins_vs_baseline: dict[str, int]
    metadata: dict = field(default_factory=dict)

    def table(self, metric: str) -> np.ndarray:
        """links × approaches array of ``rmse`` or ``mare``."""
        pos = {(r.link, r.approach): getattr(r, metric) for r in self.rows}
        return np.array([[pos[(l, a)] for a in self.approaches] for l in self.links])


def summarize(results: Sequence, baseline: str = BASELINE) -> ComparisonReport:
    """Per-link metric tables, RMSE sums, pairwise t-tests on per-link RMSE and win counts.

    ``results`` are ForecastResult-like objects with ``approach``, ``links``,
    ``sample_index``, ``actual`` and ``predicted``.
    """
    if not results:
        raise ValueError("no results to summarise")
    links = [str(l) for l in results[0].links]
    index = np.asarray(results[0].sample_index)
    for r in results[1:]:
        if [str(l) for l in r.links] != links:
            raise ValueError(f"result {r.approach} covers a different link set")
        if not np.array_equal(np.asarray(r.sample_index), index):
            raise ValueError(f"result {r.approach} covers a different test range")
    approaches = [str(r.approach) for r in results]
    rows = []
    per_rmse: dict[str, np.ndarray] = {}
    excluded_total = 0
    for r in results:
        name = str(r.approach)
        vals = []
        for link in r.links:
            act, pred = r.actual[link], r.predicted[link]
            m, excl = mare(act, pred, return_excluded=True)
            excluded_total += excl
            row = MetricRow(str(link), name, rmse(act, pred), m, excl)
            rows.append(row)
            vals.append(row.rmse)
        per_rmse[name] = np.array(vals)
    sums = {a: float(per_rmse[a].sum()) for a in approaches}
    ttests = []
    if len(links) >= 2:
        for a, b in combinations(approaches, 2):
            ttests.append(paired_ttest(per_rmse[a], per_rmse[b], (a, b)))
    wins = {}
    if baseline in per_rmse:
        for a in approaches:
            wins[a] = 0 if a == baseline else int(np.sum(per_rmse[a] < per_rmse[baseline]))
    meta = {
        "ttest_basis": "per-link RMSE, paired by link, two-tailed",
        "mare_zero_actual_excluded": excluded_total,
        "n_test_samples": int(index.size),
    }
    return ComparisonReport(approaches, links, rows, sums, ttests, wins, meta)


def _g(v: float) -> str:
    return f"{v:.6g}"


def _n(v: float) -> float:
    return float(_g(v))


def write_report(report: ComparisonReport, out_dir: str | Path) -> list[Path]:
    """Write the table CSVs and ``report.json``; floats use 6 significant digits."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def table_csv(name: str, metric: str, scale: float):
        path = out / name
        tab = report.table(metric)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["link", *report.approaches])
            for link, row in zip(report.links, tab):
                w.writerow([link, *(_g(v * scale) for v in row)])
        written.append(path)

    table_csv("mare_table.csv", "mare", 100.0)
    table_csv("rmse_table.csv", "rmse", 1.0)

    path = out / "rmse_sums.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["approach", "rmse_sum", "wins_vs_baseline"])
        for a in report.approaches:
            w.writerow([a, _g(report.rmse_sums[a]), report.wins_vs_baseline.get(a, "")])
    written.append(path)

    path = out / "ttest_matrix.csv"
    pvals = {t.pair: t.p for t in report.ttests}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["approaches", *report.approaches])
        for i, a in enumerate(report.approaches):
            cells = [_g(pvals[(a, b)]) if j > i and (a, b) in pvals else ""
                     for j, b in enumerate(report.approaches)]
            w.writerow([a, *cells])
    written.append(path)

    doc = {
        "approaches": report.approaches,
        "links": report.links,
        "metrics": [{"link": r.link, "approach": r.approach, "rmse": _n(r.rmse),
                     "mare_percent": _n(100.0 * r.mare), "mare_excluded": r.mare_excluded}
                    for r in report.rows],
        "rmse_sums": {a: _n(v) for a, v in report.rmse_sums.items()},
        "wins_vs_baseline": report.wins_vs_baseline,
        "ttests": [{"a": t.pair[0], "b": t.pair[1], "t": _n(t.t), "df": t.df, "p": _n(t.p),
                    "degenerate": t.degenerate} for t in report.ttests],
        "metadata": report.metadata,
    }
    path = out / "report.json"
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    written.append(path)
    return written
