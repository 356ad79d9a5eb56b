"""Sweep orchestration: spec files, ranked sweep tables and their CSV form."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

from .core import (ClusterSpec, GiB, ModelArch, SweepSpec, a100_cluster,
                   default_global_batch, enumerate_layouts, model_preset)
from .reference import PredictionRow
from .throughput import CostKnobs, PerfEstimate, estimate, rank_layouts


class SpecError(ValueError):
    """A sweep spec file that cannot be turned into a SweepSpec."""


SPEC_FIELDS = {
    "model", "arch", "seq_len", "gpus", "cluster", "global_batch", "tp", "pp", "mb",
    "checkpointing", "sequence_parallel", "rmsnorm_kernel", "attention_kernels",
}

SWEEP_COLUMNS = (
    "rank", "mb", "tp", "pp", "dp", "accumulation_steps", "sequence_parallel",
    "activation_checkpointing", "rmsnorm_kernel", "attention_kernel", "feasible",
    "step_time", "mfu", "tokens_per_second", "bubble_fraction", "peak_mem_gib",
)


def _dataclass_from(cls, data: dict, what: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise SpecError(f"unknown {what} fields: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise SpecError(f"invalid {what}: {exc}") from None


def spec_from_dict(data: dict) -> SweepSpec:
    """Build a SweepSpec from its JSON form.

    The model is either a preset name (``"model": "llama-13b"``) or a full
    ``"arch"`` object; the cluster is either ``"gpus"`` (A100 nodes) or a full
    ``"cluster"`` object.  Unknown keys are rejected.
    """
    if not isinstance(data, dict):
        raise SpecError("spec must be a JSON object")
    unknown = set(data) - SPEC_FIELDS
    if unknown:
        raise SpecError(f"unknown spec fields: {sorted(unknown)}")
    seq_len = data.get("seq_len", 2048)
    if ("model" in data) == ("arch" in data):
        raise SpecError("give exactly one of 'model' (preset name) or 'arch'")
    if "model" in data:
        try:
            arch = model_preset(data["model"], seq_len)
        except KeyError as exc:
            raise SpecError(str(exc.args[0])) from None
    else:
        arch = _dataclass_from(ModelArch, {"seq_len": seq_len, **data["arch"]}, "arch")
    if ("gpus" in data) == ("cluster" in data):
        raise SpecError("give exactly one of 'gpus' or 'cluster'")
    if "gpus" in data:
        try:
            cluster = a100_cluster(int(data["gpus"]))
        except ValueError as exc:
            raise SpecError(str(exc)) from None
    else:
        cluster = _dataclass_from(ClusterSpec, data["cluster"], "cluster")
    try:
        return SweepSpec(
            arch=arch, cluster=cluster,
            global_batch=data.get("global_batch", default_global_batch(arch.seq_len)),
            tp_options=tuple(data.get("tp", (1,))),
            pp_options=tuple(data.get("pp", (1,))),
            mb_options=tuple(data.get("mb", (1,))),
            checkpointing_options=tuple(data.get("checkpointing", (False,))),
            seq_parallel_options=tuple(data.get("sequence_parallel", (False,))),
            kernel_options=tuple(data.get("rmsnorm_kernel", (False,))),
            attention_kernels=tuple(data.get("attention_kernels", ("flash2",))),
        )
    except (TypeError, ValueError) as exc:
        raise SpecError(f"invalid sweep spec: {exc}") from None


def load_spec(path) -> SweepSpec:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: not valid JSON ({exc})") from None
    return spec_from_dict(data)


@dataclass(frozen=True)
class SweepResult:
    spec: SweepSpec
    estimates: tuple[PerfEstimate, ...]

    @property
    def empty(self) -> bool:
        return not self.estimates

    @property
    def notice(self) -> Optional[str]:
        if self.empty:
            return ("sweep produced no admissible layouts: every tp/pp/mb combination "
                    "violates divisibility or world-size rules")
        if not any(e.feasible for e in self.estimates):
            return "every admissible layout is predicted to run out of memory"
        return None


def _estimate_one(args):
    arch, cluster, layout, knobs = args
    return estimate(arch, cluster, layout, knobs)


def run_sweep(spec: SweepSpec, knobs: Optional[CostKnobs] = None, workers: int = 1) -> SweepResult:
    """Estimate every admissible layout of ``spec`` and rank them.

    With ``workers > 1`` layouts are estimated in a process pool; results are
    collected in enumeration order so the output does not depend on timing.
    """
    knobs = knobs or CostKnobs()
    layouts = enumerate_layouts(spec)
    jobs = [(spec.arch, spec.cluster, layout, knobs) for layout in layouts]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            estimates = list(pool.map(_estimate_one, jobs))
    else:
        estimates = [_estimate_one(job) for job in jobs]
    return SweepResult(spec, tuple(rank_layouts(estimates)))


def _cell(value) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(value)
    return str(value)


def sweep_rows(result: SweepResult) -> list[dict]:
    rows = []
    for rank, est in enumerate(result.estimates, start=1):
        lay = est.layout
        rows.append({
            "rank": rank if est.feasible else None,
            "mb": lay.micro_batch, "tp": lay.tp_size, "pp": lay.pp_size, "dp": lay.dp_size,
            "accumulation_steps": lay.accumulation_steps,
            "sequence_parallel": lay.sequence_parallel,
            "activation_checkpointing": lay.activation_checkpointing,
            "rmsnorm_kernel": lay.rmsnorm_kernel,
            "attention_kernel": lay.attention_kernel,
            "feasible": est.feasible,
            "step_time": est.step_time,
            "mfu": est.mfu,
            "tokens_per_second": est.tokens_per_second,
            "bubble_fraction": est.bubble_fraction,
            "peak_mem_gib": est.peak_mem_bytes / GiB,
        })
    return rows


def format_csv(rows: Sequence[dict], columns: Sequence[str] = SWEEP_COLUMNS) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row[c]) for c in columns])
    return out.getvalue()


def _pretty(value) -> str:
    if isinstance(value, float) and not math.isnan(value):
        return f"{value:.4g}"
    return _cell(value) or "-"


def format_table(rows: Sequence[dict], columns: Sequence[str] = SWEEP_COLUMNS) -> str:
    """Aligned plain-text rendering of the same rows as :func:`format_csv`."""
    cells = [list(columns)] + [[_pretty(row[c]) for c in columns] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(columns))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def load_predictions(path) -> list[PredictionRow]:
    """Read a sweep CSV written by :func:`format_csv` back as prediction rows."""
    path = Path(path)
    reader = csv.DictReader(io.StringIO(path.read_text()))
    missing = {"mb", "tp", "pp", "sequence_parallel", "activation_checkpointing",
               "rmsnorm_kernel", "attention_kernel", "feasible", "step_time"} - set(reader.fieldnames or ())
    if missing:
        raise SpecError(f"{path}: missing columns {sorted(missing)}")
    rows = []
    for row in reader:
        try:
            flag = {name: row[name].strip().lower() == "true" for name in
                    ("sequence_parallel", "activation_checkpointing", "rmsnorm_kernel", "feasible")}
            key = (int(row["mb"]), int(row["tp"]), int(row["pp"]), flag["sequence_parallel"],
                   flag["activation_checkpointing"], flag["rmsnorm_kernel"],
                   row["attention_kernel"].strip())
            step = float(row["step_time"]) if row["step_time"].strip() else None
        except ValueError as exc:
            raise SpecError(f"{path}:{reader.line_num}: {exc}") from None
        rows.append(PredictionRow(key, flag["feasible"], step))
    return rows
