"""Absolute trajectory error and model comparison tables."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence

import numpy as np


@dataclass(frozen=True)
class AteReport:
    mean: float
    median: float
    series: np.ndarray
    runtime: float = 0.0
    times: np.ndarray = field(default_factory=lambda: np.zeros(0))


def ate(est_times, est_xy, truth_times, truth_xy, runtime: float = 0.0) -> AteReport:
    """Per-epoch horizontal error sqrt(dx^2 + dy^2), without any alignment.

    Every estimate timestamp must exist exactly in the truth timestamps.
    Extra columns (e.g. z) are ignored.
    """
    est_times = np.asarray(est_times, dtype=float)
    truth_times = np.asarray(truth_times, dtype=float)
    est = _xy(est_xy, len(est_times))
    truth = _xy(truth_xy, len(truth_times))
    order = np.argsort(truth_times, kind="stable")
    pos = np.searchsorted(truth_times[order], est_times)
    pos = np.minimum(pos, len(truth_times) - 1) if len(truth_times) else pos
    for t, i in zip(est_times, pos):
        if not len(truth_times) or truth_times[order][i] != t:
            raise KeyError(f"no ground truth at t={t!r}")
    d = est - truth[order][pos] if len(est_times) else np.zeros((0, 2))
    series = np.hypot(d[:, 0], d[:, 1])
    if len(series) == 0:
        return AteReport(0.0, 0.0, series, runtime, est_times)
    return AteReport(float(series.mean()), float(np.median(series)), series, runtime, est_times)


def _xy(a, n: int) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return a.reshape(n, -1)[:, :2] if n else np.zeros((0, 2))


def ate_of_results(results, truth_times, truth_xy) -> AteReport:
    """ATE of a list of pipeline epoch results; runtime is the sum of epoch runtimes."""
    times = [r.time for r in results]
    xy = [(r.pose.x, r.pose.y) for r in results]
    return ate(times, np.reshape(xy, (-1, 2)), truth_times, truth_xy, float(sum(r.runtime for r in results)))


CSV_FIELDS = ("model", "dataset", "ate_mean_m", "ate_median_m", "runtime_s", "best")


@dataclass
class Comparison:
    """ATE/runtime per (model, dataset), models and datasets in insertion order."""

    models: List[str]
    datasets: List[str]
    cells: Dict[tuple, tuple]  # (model, dataset) -> (mean ATE, median ATE, runtime)

    def best(self, dataset: str) -> str:
        """Model with the lowest mean ATE on ``dataset`` (first one on ties)."""
        rows = [(self.cells[(m, dataset)][0], i, m) for i, m in enumerate(self.models) if (m, dataset) in self.cells]
        return min(rows)[2]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for d in self.datasets:
            best = self.best(d)
            for m in self.models:
                if (m, d) in self.cells:
                    mean, med, rt = self.cells[(m, d)]
                    w.writerow([m, d, repr(mean), repr(med), repr(rt), int(m == best)])
        return buf.getvalue()

    def to_text(self, precision: int = 3) -> str:
        """Aligned table with an ATE and a time column per dataset; ``*`` marks the best ATE."""
        head1 = ["", *[c for d in self.datasets for c in (d, "")]]
        head2 = ["Model", *["ATE [m]", "Time [s]"] * len(self.datasets)]
        rows = [head1, head2]
        best = {d: self.best(d) for d in self.datasets}
        for m in self.models:
            row = [m]
            for d in self.datasets:
                if (m, d) not in self.cells:
                    row += ["-", "-"]
                    continue
                mean, _, rt = self.cells[(m, d)]
                row += [f"{mean:.{precision}f}" + ("*" if best[d] == m else ""), f"{rt:.1f}"]
            rows.append(row)
        widths = [max(len(r[i]) for r in rows) for i in range(len(head2))]
        lines = []
        for r in rows:
            cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
            lines.append("  ".join(cells).rstrip())
        return "\n".join(lines) + "\n"


def compare(runs: Mapping[str, Mapping[str, AteReport]]) -> Comparison:
    """Build the comparison of ``runs[model][dataset]`` reports."""
    models = list(runs)
    datasets: List[str] = []
    cells = {}
    for m, per in runs.items():
        for d, rep in per.items():
            if d not in datasets:
                datasets.append(d)
            cells[(m, d)] = (float(rep.mean), float(rep.median), float(rep.runtime))
    return Comparison(models, datasets, cells)


def parse_comparison_csv(text: str) -> Comparison:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_FIELDS:
        raise ValueError("not a comparison CSV (header mismatch)")
    models, datasets, cells = [], [], {}
    for row in reader:
        m, d = row["model"], row["dataset"]
        if m not in models:
            models.append(m)
        if d not in datasets:
            datasets.append(d)
        cells[(m, d)] = (float(row["ate_mean_m"]), _opt_float(row["ate_median_m"]), float(row["runtime_s"]))
    return Comparison(models, datasets, cells)


def _opt_float(text: str) -> float:
    # an empty cell (e.g. a published table without medians) reads as nan
    return float(text) if text.strip() else float("nan")


def read_truth(records: Sequence):
    """(times, xy) arrays from parsed ground-truth records."""
    times = np.array([r.time for r in records], dtype=float)
    xy = np.array([(r.x, r.y) for r in records], dtype=float).reshape(-1, 2)
    return times, xy
