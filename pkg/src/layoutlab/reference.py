"""Measured reference tables and prediction-vs-measurement validation.

Reference CSVs use lowercase snake-case headers, ``true``/``false`` booleans
and empty fields for measurements that do not exist (OOM rows).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

from scipy.stats import kendalltau

from .core import ParallelLayout

REFERENCE_COLUMNS = (
    "step_time", "mfu", "mb", "tp", "pp", "sequence_parallel", "activation_checkpointing",
    "rmsnorm_kernel", "flash2", "model_tag", "seq_len", "gpus", "oom",
)

BUNDLED_TABLES = {
    "c2": "c2_llama13b_2k.csv",
    "c3": "c3_llama13b_8k.csv",
    "c4": "c4_llama30b_2k.csv",
    "c5": "c5_llama30b_8k.csv",
    "c6": "c6_llama65b_2k.csv",
    "best": "best_runs.csv",
}


class ReferenceParseError(ValueError):
    pass


@dataclass(frozen=True)
class ReferenceRecord:
    model_tag: str
    seq_len: int
    gpus: int
    step_time: Optional[float]
    mfu: Optional[float]
    mb: int
    tp: int
    pp: int
    sequence_parallel: bool
    activation_checkpointing: bool
    rmsnorm_kernel: bool
    flash2: bool
    oom: bool

    def __post_init__(self) -> None:
        if self.oom != (self.step_time is None):
            raise ValueError("oom rows must have no step_time and measured rows must have one")
        if self.mfu is not None and not 0 < self.mfu < 1:
            raise ValueError(f"mfu must be a ratio in (0, 1), got {self.mfu!r}")
        if self.step_time is not None and self.step_time <= 0:
            raise ValueError("step_time must be positive")
        if min(self.mb, self.tp, self.pp, self.seq_len, self.gpus) <= 0:
            raise ValueError("mb, tp, pp, seq_len and gpus must be positive")

    @property
    def attention_kernel(self) -> str:
        return "flash2" if self.flash2 else "flash1"

    @property
    def key(self) -> tuple:
        """Same shape as :attr:`ParallelLayout.key`."""
        return (self.mb, self.tp, self.pp, self.sequence_parallel,
                self.activation_checkpointing, self.rmsnorm_kernel, self.attention_kernel)

    def layout(self, global_batch: int) -> ParallelLayout:
        return ParallelLayout.derive(
            self.gpus, self.tp, self.pp, self.mb, global_batch,
            activation_checkpointing=self.activation_checkpointing,
            sequence_parallel=self.sequence_parallel,
            rmsnorm_kernel=self.rmsnorm_kernel, attention_kernel=self.attention_kernel,
        )


def _parse_bool(text: str) -> bool:
    value = text.strip().lower()
    if value == "true":
        return True
    if value == "false":
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def _parse_optional(text: str) -> Optional[float]:
    text = text.strip()
    return float(text) if text else None


def parse_reference(text: str, source: str = "<string>") -> list[ReferenceRecord]:
    """Parse reference CSV text; errors name the offending line."""
    lines = text.splitlines()
    if not any(line.strip() for line in lines):
        return []
    reader = csv.reader(lines)
    header = [h.strip() for h in next(reader)]
    missing = set(REFERENCE_COLUMNS) - set(header)
    if missing:
        raise ReferenceParseError(f"{source}:1: missing columns {sorted(missing)}")
    records = []
    for row in reader:
        lineno = reader.line_num
        if not any(cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise ReferenceParseError(
                f"{source}:{lineno}: expected {len(header)} fields, got {len(row)}")
        cells = dict(zip(header, row))
        try:
            mfu = _parse_optional(cells["mfu"])
            records.append(ReferenceRecord(
                model_tag=cells["model_tag"].strip(),
                seq_len=int(cells["seq_len"]),
                gpus=int(cells["gpus"]),
                step_time=_parse_optional(cells["step_time"]),
                # tables print MFU in percent
                mfu=None if mfu is None else mfu / 100,
                mb=int(cells["mb"]),
                tp=int(cells["tp"]),
                pp=int(cells["pp"]),
                sequence_parallel=_parse_bool(cells["sequence_parallel"]),
                activation_checkpointing=_parse_bool(cells["activation_checkpointing"]),
                rmsnorm_kernel=_parse_bool(cells["rmsnorm_kernel"]),
                flash2=_parse_bool(cells["flash2"]),
                oom=_parse_bool(cells["oom"]),
            ))
        except ValueError as exc:
            raise ReferenceParseError(f"{source}:{lineno}: {exc}") from None
    return records


def load_reference(path) -> list[ReferenceRecord]:
    path = Path(path)
    return parse_reference(path.read_text(), str(path))


def bundled_path(name: str):
    """Path-like handle to a bundled table: ``c2`` ... ``c6``, ``best`` or a file name."""
    filename = BUNDLED_TABLES.get(name, name)
    return resources.files("layoutlab") / "data" / filename


def load_bundled(name: str) -> list[ReferenceRecord]:
    handle = bundled_path(name)
    return parse_reference(handle.read_text(), f"layoutlab/data/{handle.name}")


def _format_float(value: Optional[float]) -> str:
    return "" if value is None else repr(value)


def serialize_reference(records: Iterable[ReferenceRecord]) -> str:
    """Inverse of :func:`parse_reference` (floats use ``repr`` so the round trip is exact)."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(REFERENCE_COLUMNS)
    for r in records:
        mfu = None if r.mfu is None else r.mfu * 100
        writer.writerow([
            _format_float(r.step_time), _format_float(mfu), r.mb, r.tp, r.pp,
            *(str(getattr(r, name)).lower() for name in
              ("sequence_parallel", "activation_checkpointing", "rmsnorm_kernel", "flash2")),
            r.model_tag, r.seq_len, r.gpus, str(r.oom).lower(),
        ])
    return out.getvalue()


# -- validation ---------------------------------------------------------------

@dataclass(frozen=True)
class PredictionRow:
    """One predicted layout, reduced to what validation needs."""

    key: tuple
    feasible: bool
    step_time: Optional[float] = None

    @classmethod
    def from_estimate(cls, est) -> "PredictionRow":
        return cls(est.layout.key, est.feasible, est.step_time if est.feasible else None)

    @classmethod
    def from_record(cls, record: ReferenceRecord) -> "PredictionRow":
        return cls(record.key, not record.oom, record.step_time)


@dataclass(frozen=True)
class ComparedRow:
    key: tuple
    measured_oom: bool
    predicted_feasible: bool
    measured_step_time: Optional[float]
    predicted_step_time: Optional[float]


@dataclass(frozen=True)
class ValidationReport:
    rank_correlation: float
    mutually_feasible: int
    joined: int
    oom_accuracy: float
    oom_false_feasible_count: int
    oom_false_infeasible_count: int
    top1_hit: bool
    top3_hit: bool
    predicted_best: Optional[tuple]
    measured_top3: tuple
    rows: tuple[ComparedRow, ...]
    unmatched_reference: tuple = ()
    duplicate_reference: tuple = ()

    def false_feasible_rows(self) -> list[ComparedRow]:
        return [r for r in self.rows if r.measured_oom and r.predicted_feasible]

    def summary(self) -> str:
        tau = "n/a" if math.isnan(self.rank_correlation) else f"{self.rank_correlation:.3f}"
        return (
            f"joined={self.joined} mutually_feasible={self.mutually_feasible} tau={tau} "
            f"oom_accuracy={self.oom_accuracy:.1%} false_feasible={self.oom_false_feasible_count} "
            f"false_infeasible={self.oom_false_infeasible_count} "
            f"top1_hit={self.top1_hit} top3_hit={self.top3_hit}"
        )


def _sort_key(key: tuple) -> tuple:
    return tuple(str(k) if isinstance(k, str) else k for k in key)


def validate(predictions: Sequence, reference: Sequence[ReferenceRecord]) -> ValidationReport:
    """Join predictions to reference rows on the layout key and score the agreement.

    ``predictions`` may hold :class:`PredictionRow` or ``PerfEstimate``
    objects.  A reference key that appears twice keeps its first (fastest
    printed) row; the later ones are listed in ``duplicate_reference``.
    """
    preds = {}
    for p in predictions:
        row = p if isinstance(p, PredictionRow) else PredictionRow.from_estimate(p)
        preds.setdefault(row.key, row)
    refs, duplicates = {}, []
    for r in reference:
        if r.key in refs:
            duplicates.append(r.key)
        else:
            refs[r.key] = r

    rows, unmatched = [], []
    for key in sorted(refs, key=_sort_key):
        if key not in preds:
            unmatched.append(key)
            continue
        r, p = refs[key], preds[key]
        rows.append(ComparedRow(key, r.oom, p.feasible, r.step_time,
                                p.step_time if p.feasible else None))
    if not rows:
        raise ValueError("no prediction rows join the reference table")

    correct = sum(r.measured_oom != r.predicted_feasible for r in rows)
    false_feasible = sum(r.measured_oom and r.predicted_feasible for r in rows)
    false_infeasible = sum(not r.measured_oom and not r.predicted_feasible for r in rows)

    both = [r for r in rows if not r.measured_oom and r.predicted_feasible]
    if len(both) >= 2:
        tau = float(kendalltau([r.predicted_step_time for r in both],
                               [r.measured_step_time for r in both]).statistic)
    else:
        tau = math.nan

    measured = sorted((r for r in rows if not r.measured_oom),
                      key=lambda r: (r.measured_step_time, _sort_key(r.key)))
    top3 = tuple(r.key for r in measured[:3])
    predicted = sorted((r for r in rows if r.predicted_feasible),
                       key=lambda r: (r.predicted_step_time, _sort_key(r.key)))
    best = predicted[0].key if predicted else None

    return ValidationReport(
        rank_correlation=tau,
        mutually_feasible=len(both),
        joined=len(rows),
        oom_accuracy=correct / len(rows),
        oom_false_feasible_count=false_feasible,
        oom_false_infeasible_count=false_infeasible,
        top1_hit=best is not None and bool(top3) and best == top3[0],
        top3_hit=best is not None and best in top3,
        predicted_best=best,
        measured_top3=top3,
        rows=tuple(rows),
        unmatched_reference=tuple(unmatched),
        duplicate_reference=tuple(duplicates),
    )

