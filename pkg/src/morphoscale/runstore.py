"""Run-record tables and the min/max seed aggregation used for error bars.

CSV layout: ``family,variant,parameter_count,dataset_size,seed,test_loss``
followed by optional per-question loss columns named ``q:<question>``,
conventionally ``q:<campaign>/<question label>``. An empty per-question
cell means that run did not report the question.

The canonical form written by :func:`emit_runs` orders rows by
(family, variant, dataset_size, seed), orders question columns
alphabetically, and writes every loss with 6 significant digits.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from morphoscale.scalefit import RunObservation

REQUIRED_COLUMNS = ("family", "variant", "parameter_count", "dataset_size", "seed", "test_loss")
QUESTION_PREFIX = "q:"


class RunTableError(ValueError):
    pass


class MissingTaskError(KeyError):
    pass


@dataclass
class RunTable:
    runs: list[RunObservation] = field(default_factory=list)
    question_losses: list[dict[str, float]] = field(default_factory=list)
    question_columns: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.runs)


def _key(r: RunObservation) -> tuple:
    return (r.family, r.variant, r.dataset_size, r.seed)


def parse_runs_text(text: str, source: str = "<runs>") -> RunTable:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise RunTableError(f"{source}: empty file, expected a header row") from None
    header = [h.strip() for h in header]
    missing = [c for c in REQUIRED_COLUMNS if c not in header]
    if missing:
        raise RunTableError(f"{source}: line 1: missing columns {missing}")
    unknown = [h for h in header if h not in REQUIRED_COLUMNS and not h.startswith(QUESTION_PREFIX)]
    if unknown:
        raise RunTableError(f"{source}: line 1: unexpected columns {unknown}")
    qcols = [h[len(QUESTION_PREFIX):] for h in header if h.startswith(QUESTION_PREFIX)]
    pos = {h: i for i, h in enumerate(header)}

    table = RunTable(question_columns=qcols)
    seen: dict[tuple, int] = {}
    for line_no, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise RunTableError(f"{source}: line {line_no}: expected {len(header)} fields, got {len(row)}")
        try:
            loss = float(row[pos["test_loss"]])
            run = RunObservation(
                family=row[pos["family"]],
                variant=row[pos["variant"]],
                parameter_count=int(row[pos["parameter_count"]]),
                dataset_size=int(row[pos["dataset_size"]]),
                seed=int(row[pos["seed"]]),
                test_loss=loss,
            )
            qlosses = {}
            for q in qcols:
                cell = row[pos[QUESTION_PREFIX + q]].strip()
                if cell:
                    value = float(cell)
                    if not math.isfinite(value):
                        raise ValueError(f"non-finite loss for question {q!r}")
                    qlosses[q] = value
        except ValueError as exc:
            raise RunTableError(f"{source}: line {line_no}: {exc}") from None
        key = _key(run)
        if key in seen:
            raise RunTableError(f"{source}: line {line_no}: duplicate run {key} (first seen on line {seen[key]})")
        seen[key] = line_no
        table.runs.append(run)
        table.question_losses.append(qlosses)
    return table


def parse_runs(path: str | Path) -> RunTable:
    return parse_runs_text(Path(path).read_text(encoding="utf-8"), source=str(path))


def format_loss(x: float) -> str:
    return f"{x:.6g}"


def emit_runs(table: RunTable) -> str:
    qcols = sorted(table.question_columns)
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(list(REQUIRED_COLUMNS) + [QUESTION_PREFIX + q for q in qcols])
    order = sorted(range(len(table.runs)), key=lambda i: _key(table.runs[i]))
    for i in order:
        r = table.runs[i]
        q = table.question_losses[i] if table.question_losses else {}
        w.writerow(
            [r.family, r.variant, r.parameter_count, r.dataset_size, r.seed, format_loss(r.test_loss)]
            + [format_loss(q[c]) if c in q else "" for c in qcols]
        )
    return out.getvalue()


def table_from_runs(runs: Sequence[RunObservation]) -> RunTable:
    return RunTable(list(runs), [{} for _ in runs], [])


@dataclass(frozen=True)
class AggregateRow:
    family: str
    variant: str
    dataset_size: int
    loss_mean: float
    loss_min: float
    loss_max: float
    n_seeds: int

    def as_dict(self) -> dict:
        return {
            "family": self.family,
            "variant": self.variant,
            "dataset_size": self.dataset_size,
            "loss_mean": self.loss_mean,
            "loss_min": self.loss_min,
            "loss_max": self.loss_max,
            "n_seeds": self.n_seeds,
        }


def _aggregate(values: dict[tuple, list[float]]) -> list[AggregateRow]:
    rows = []
    for (family, variant, size), losses in sorted(values.items()):
        # fsum is exactly rounded, so the mean does not depend on row order
        mean = math.fsum(losses) / len(losses)
        lo, hi = min(losses), max(losses)
        mean = min(max(mean, lo), hi)
        rows.append(AggregateRow(family, variant, size, mean, lo, hi, len(losses)))
    return rows


def aggregate_minmax(table: RunTable) -> list[AggregateRow]:
    """Mean, min and max test loss over seeds for each (family, variant, size)."""
    if not table.runs:
        raise RunTableError("cannot aggregate an empty run table")
    groups: dict[tuple, list[float]] = defaultdict(list)
    for r in table.runs:
        groups[(r.family, r.variant, r.dataset_size)].append(r.test_loss)
    return _aggregate(groups)


def _task_columns(table: RunTable, task_label: str, mapping: Mapping[str, Sequence[str]] | None) -> list[str]:
    if mapping is not None:
        if task_label not in mapping:
            raise MissingTaskError(f"task {task_label!r} is not in the task mapping")
        cols = [c[len(QUESTION_PREFIX):] if c.startswith(QUESTION_PREFIX) else c for c in mapping[task_label]]
        return [c for c in cols if c in table.question_columns]
    return [c for c in table.question_columns if c.rsplit("/", 1)[-1] == task_label]


def aggregate_task_loss(
    table: RunTable, task_label: str, mapping: Mapping[str, Sequence[str]] | None = None
) -> list[AggregateRow]:
    """Per-run unweighted mean over the task's campaign columns, then min/max over seeds.

    Without a ``mapping``, a column matches when its question label (the
    part after the last ``/``) equals ``task_label`` exactly. Runs that
    report none of the matching columns are skipped.
    """
    cols = _task_columns(table, task_label, mapping)
    groups: dict[tuple, list[float]] = defaultdict(list)
    for r, q in zip(table.runs, table.question_losses):
        present = [q[c] for c in cols if c in q]
        if present:
            groups[(r.family, r.variant, r.dataset_size)].append(math.fsum(present) / len(present))
    if not groups:
        raise MissingTaskError(f"no run reports a loss for task {task_label!r}")
    return _aggregate(groups)


def load_task_mapping(path: str | Path) -> dict[str, list[str]]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, dict) or not all(isinstance(v, list) for v in doc.values()):
        raise RunTableError(f"{path}: task mapping must be an object of label -> list of columns")
    return {str(k): [str(c) for c in v] for k, v in doc.items()}
