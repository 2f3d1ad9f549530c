"""Checkpoint-cadence trajectories, smoothing, and cross-task correlation.

Smoothing is for display only: correlation analysis always runs on the
raw trajectories (there is deliberately no smoothing hook on that path).
The EMA convention is s0 = x0, s_t = alpha * s_{t-1} + (1 - alpha) * x_t.
Zero-variance pairs are reported as explicit 'undefined' records rather
than dropped.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import EmptyInputError, UndefinedCorrelationError, ValidationError

EMA_FACTOR = 0.6


def ema_smooth(series: Sequence[float], factor: float = EMA_FACTOR) -> list[float]:
    values = [float(v) for v in series]
    if not values:
        raise EmptyInputError("cannot smooth an empty series")
    if not 0.0 <= factor < 1.0:
        raise ValidationError(f"smoothing factor {factor} outside [0, 1)")
    out = [values[0]]
    for x in values[1:]:
        out.append(factor * out[-1] + (1.0 - factor) * x)
    return out


def _validated(x, y) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(x, dtype=np.float64).reshape(-1)
    b = np.asarray(y, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise ValidationError(f"series lengths differ: {a.size} vs {b.size}")
    if a.size < 3:
        raise ValidationError(f"correlation needs at least 3 points, got {a.size}")
    return a, b


def pearson(x, y) -> float:
    a, b = _validated(x, y)
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0.0:
        raise UndefinedCorrelationError("zero variance series")
    return float((a * b).sum() / denom)


def average_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the average of their positions."""
    a = np.asarray(x, dtype=np.float64).reshape(-1)
    order = np.argsort(a, kind="stable")
    ranks = np.empty(a.size, dtype=np.float64)
    i = 0
    while i < a.size:
        j = i
        while j + 1 < a.size and a[order[j + 1]] == a[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    a, b = _validated(x, y)
    return pearson(average_ranks(a), average_ranks(b))


@dataclass
class TrajectoryTable:
    steps: list[int] = field(default_factory=list)
    columns: dict[str, list[float]] = field(default_factory=dict)

    def append_row(self, step: int, metrics: dict[str, float]) -> None:
        if self.steps and step <= self.steps[-1]:
            raise ValidationError(f"steps must strictly increase, got {step}")
        if self.columns and set(metrics) != set(self.columns):
            raise ValidationError("row metric names do not match existing columns")
        self.steps.append(int(step))
        for name, value in metrics.items():
            self.columns.setdefault(name, []).append(float(value))

    def metric_names(self) -> list[str]:
        return sorted(self.columns)


@dataclass(frozen=True)
class CorrelationEntry:
    metric_a: str
    metric_b: str
    pearson_r: float | None
    spearman_rho: float | None
    count: int

    @property
    def defined(self) -> bool:
        return self.pearson_r is not None


@dataclass
class CorrelationReport:
    entries: list[CorrelationEntry] = field(default_factory=list)


def correlate_tasks(table: TrajectoryTable,
                    pairs: Sequence[tuple[str, str]] | None = None) -> CorrelationReport:
    """Pearson and Spearman over raw trajectories for each requested pair."""
    if pairs is None:
        names = table.metric_names()
        pairs = [(a, b) for i, a in enumerate(names) for b in names[i:]]
    report = CorrelationReport()
    for a, b in pairs:
        if a not in table.columns or b not in table.columns:
            raise ValidationError(f"unknown trajectory column in pair ({a}, {b})")
        xs, ys = table.columns[a], table.columns[b]
        if len(xs) < 3:
            raise ValidationError(f"pair ({a}, {b}) has fewer than 3 shared steps")
        try:
            entry = CorrelationEntry(a, b, pearson(xs, ys), spearman(xs, ys), len(xs))
        except UndefinedCorrelationError:
            entry = CorrelationEntry(a, b, None, None, len(xs))
        report.entries.append(entry)
    return report


def track(total_steps: int, cadence: int,
          evaluate: Callable[[int], dict[str, float]]) -> TrajectoryTable:
    """Evaluate at each cadence point and assemble the trajectory table."""
    if cadence <= 0 or total_steps % cadence != 0:
        raise ValidationError(f"cadence {cadence} must divide total steps {total_steps}")
    table = TrajectoryTable()
    for step in range(cadence, total_steps + 1, cadence):
        table.append_row(step, evaluate(step))
    return table


# -- files -----------------------------------------------------------------------


def write_trajectory(path: Path, table: TrajectoryTable, config_hash: str) -> None:
    names = table.metric_names()
    lines = [f"# config_hash={config_hash}", "\t".join(["step"] + names)]
    for i, step in enumerate(table.steps):
        lines.append("\t".join([str(step)] + [f"{table.columns[n][i]:.17g}" for n in names]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_trajectory(path: Path) -> TrajectoryTable:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    rows = [ln for ln in lines if ln and not ln.startswith("#")]
    header = rows[0].split("\t")
    table = TrajectoryTable()
    for row in rows[1:]:
        fields = row.split("\t")
        table.append_row(int(fields[0]),
                         {name: float(v) for name, v in zip(header[1:], fields[1:])})
    return table


def write_correlations(path: Path, report: CorrelationReport, config_hash: str) -> None:
    lines = [f"# config_hash={config_hash}",
             "metric_a\tmetric_b\tpearson\tspearman\tn\tstatus"]
    for e in report.entries:
        if e.defined:
            lines.append(f"{e.metric_a}\t{e.metric_b}\t{e.pearson_r:.17g}"
                         f"\t{e.spearman_rho:.17g}\t{e.count}\tok")
        else:
            lines.append(f"{e.metric_a}\t{e.metric_b}\tnan\tnan\t{e.count}\tundefined")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
