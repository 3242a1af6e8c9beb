"""Continual-learning metrics, fixture verification, and report export.

Given a T x T accuracy matrix A (row i = checkpoint after task i+1,
column j = accuracy on task j+1's test set, in percent):

* Transfer_j = mean of A[i][j] over rows i < j (checkpoints from BEFORE
  task j was trained; undefined for the first task),
* Average_j  = mean of column j over ALL T rows,
* Last_j     = A[T-1][j].

Each metric also reports the mean over its defined per-task values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .errors import ArgumentError, DimensionError
from . import fixtures as _fixtures


def _validate_matrix(matrix) -> list[list[float]]:
    if not matrix:
        raise ArgumentError("accuracy matrix is empty")
    t = len(matrix)
    rows = []
    for i, row in enumerate(matrix):
        row = list(row)
        if len(row) != t:
            raise DimensionError(
                f"accuracy matrix must be square: row {i} has {len(row)} "
                f"entries, expected {t}"
            )
        for v in row:
            if not isinstance(v, (int, float)) or not math.isfinite(v):
                raise ArgumentError(f"non-numeric accuracy entry {v!r} in row {i}")
        rows.append([float(v) for v in row])
    return rows


def metric_transfer(matrix) -> tuple[list[Optional[float]], Optional[float]]:
    """Per-task transfer (None for the first task) and the mean over the
    defined entries; (all-None, None) for a single-task run."""
    a = _validate_matrix(matrix)
    t = len(a)
    values: list[Optional[float]] = [None]
    for j in range(1, t):
        values.append(sum(a[i][j] for i in range(j)) / j)
    defined = [v for v in values if v is not None]
    mean = sum(defined) / len(defined) if defined else None
    return values, mean


def metric_average(matrix) -> tuple[list[float], float]:
    a = _validate_matrix(matrix)
    t = len(a)
    values = [sum(a[i][j] for i in range(t)) / t for j in range(t)]
    return values, sum(values) / t


def metric_last(matrix) -> tuple[list[float], float]:
    a = _validate_matrix(matrix)
    values = list(a[-1])
    return values, sum(values) / len(values)


@dataclass
class MetricReport:
    transfer: list[Optional[float]]
    transfer_mean: Optional[float]
    average: list[float]
    average_mean: float
    last: list[float]
    last_mean: float


def metric_report(matrix) -> MetricReport:
    transfer, transfer_mean = metric_transfer(matrix)
    average, average_mean = metric_average(matrix)
    last, last_mean = metric_last(matrix)
    return MetricReport(transfer, transfer_mean, average, average_mean, last, last_mean)


def round_half_up(value: float, ndigits: int = 1) -> float:
    """Table-style display rounding: .05 always rounds up."""
    scale = 10.0 ** ndigits
    return math.floor(value * scale + 0.5) / scale


# --- fixture verification -------------------------------------------------

@dataclass
class FixtureCheck:
    variant: str
    metric: str
    task: str          # task name or "mean"
    computed: float
    expected: float
    passed: bool

    @property
    def diff(self) -> float:
        return abs(self.computed - self.expected)


@dataclass
class FixtureReport:
    checks: list[FixtureCheck]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> list[FixtureCheck]:
        return [c for c in self.checks if not c.passed]


def verify_paper_fixtures(fixtures=None, tolerance: float = 0.1) -> FixtureReport:
    """Recompute Transfer/Average/Last from the pinned raw matrices and
    compare every per-task value and mean against the pinned summary rows.

    The comparison allows a tiny representation slack on top of the
    tolerance: the reference tables round to one decimal, and a decimal
    difference of exactly 0.1 (e.g. 59.5 vs 59.4) lands at 0.100000...014
    in binary floating point, which must still count as "within 0.1"."""
    if fixtures is None:
        fixtures = _fixtures.FIXTURES
    checks = []
    slack = tolerance + 1e-9

    def add(variant, metric, task, computed, expected):
        if expected is None:
            return
        ok = computed is not None and abs(computed - expected) <= slack
        checks.append(FixtureCheck(variant=variant, metric=metric, task=task,
                                   computed=computed, expected=expected, passed=ok))

    for variant, (raw, expected) in fixtures.items():
        report = metric_report(raw)
        names = _fixtures.TASK_NAMES if len(raw) == len(_fixtures.TASK_NAMES) else [
            f"task{i + 1}" for i in range(len(raw))
        ]
        for metric, values, mean in (
            ("transfer", report.transfer, report.transfer_mean),
            ("average", report.average, report.average_mean),
            ("last", report.last, report.last_mean),
        ):
            for name, computed, exp in zip(names, values, expected[metric]):
                add(variant, metric, name, computed, exp)
            add(variant, metric, "mean", mean, expected[f"{metric}_mean"])
    return FixtureReport(checks=checks, tolerance=tolerance)


# --- model evaluation ----------------------------------------------------

def accuracy(model, task, *, routing: str = "oracle", autoencoders=None) -> float:
    """Percent accuracy of the model on one task's test split.

    routing="oracle" uses the task's own router; routing="inferred" routes
    each sample through autoencoder task inference (OOD or unknown tasks
    fall back to the adapter-free path)."""
    from .trainer import classify_sample  # local import to avoid a cycle

    if routing not in ("oracle", "inferred"):
        raise ArgumentError(f"routing must be 'oracle' or 'inferred', got {routing!r}")
    if routing == "inferred" and not autoencoders:
        raise ArgumentError("inferred routing requires autoencoders")
    hits = 0
    n = task.test_x.rows
    for i in range(n):
        x = task.test_x.row(i)
        pred = classify_sample(model, x, task, routing=routing,
                               autoencoders=autoencoders)
        hits += pred == task.test_y[i]
    return 100.0 * hits / n


# --- report export -----------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v))


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(c) for c in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def export_report(run: dict, out_dir) -> list[str]:
    """Write CSV/log artifacts for a finished (or partial) run dict (the
    run_result.json shape). Returns the artifact file names written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = list(run["task_names"])
    written = []

    def matrix_csv(fname, matrix):
        rows = [[name] + [_fmt(v) for v in row]
                for name, row in zip(names, matrix)]
        _write_csv(out / fname, ["checkpoint"] + names, rows)
        written.append(fname)

    def metrics_csv(fname, matrix):
        rep = metric_report(matrix)
        rows = [
            ["transfer"] + [_fmt(v) for v in rep.transfer] + [_fmt(rep.transfer_mean)],
            ["average"] + [_fmt(v) for v in rep.average] + [_fmt(rep.average_mean)],
            ["last"] + [_fmt(v) for v in rep.last] + [_fmt(rep.last_mean)],
        ]
        _write_csv(out / fname, ["metric"] + names + ["mean"], rows)
        written.append(fname)

    completed = run.get("completed_tasks", len(run.get("matrix", [])))
    matrix = [row for row in run.get("matrix", [])][:completed]
    if matrix:
        matrix_csv("accuracy_matrix.csv", matrix)
        if len(matrix) == len(names):
            metrics_csv("metrics.csv", matrix)
    oracle = [row for row in run.get("matrix_oracle", [])][:completed]
    if oracle:
        matrix_csv("accuracy_matrix_oracle.csv", oracle)
        if len(oracle) == len(names):
            metrics_csv("metrics_oracle.csv", oracle)

    freeze = run.get("freeze_history")
    if freeze:
        n_blocks = len(freeze[0])
        cumulative = [0] * n_blocks
        rows = []
        for t, per_block in enumerate(freeze, start=1):
            for b in range(n_blocks):
                cumulative[b] += len(per_block[b])
            rows.append([f"task{t}"] + [str(c) for c in cumulative])
        _write_csv(out / "freeze_heatmap.csv",
                   ["after_task"] + [f"block{b}" for b in range(n_blocks)], rows)
        written.append("freeze_heatmap.csv")

    events = run.get("merge_events", [])
    lines = [
        "task={task_id} iteration={iteration} block={block_index} "
        "sources={source_a},{source_b} target={target}".format(**e)
        for e in events
    ]
    (out / "merge_events.log").write_text(
        "\n".join(lines) + ("\n" if lines else ""), encoding="utf-8"
    )
    written.append("merge_events.log")
    return written
