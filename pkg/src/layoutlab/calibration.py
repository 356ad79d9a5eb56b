"""Fit cost knobs to a measured reference table.

Two independent fits:

* memory: the activation coefficient and usable VRAM fraction, from at most
  four rows that bracket the OOM boundary;
* throughput: GEMM and link efficiencies plus collective latency, by least
  squares on log step time over the measured (non-OOM) rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import least_squares

from .core import (ClusterSpec, LayoutInvalid, ModelArch, ParallelLayout, a100_cluster,
                   default_global_batch, model_preset, validate_layout)
from .memory import MemoryCalibration, calibrate_memory
from .reference import ReferenceRecord
from .throughput import CostKnobs, simulate_step

# knob -> (lower, upper) bounds for the throughput fit
FIT_BOUNDS = {
    "matmul_efficiency": (0.05, 1.0),
    "allreduce_efficiency": (0.01, 1.0),
    "network_efficiency": (0.01, 1.0),
    "collective_latency": (1e-7, 1e-2),
}
MAX_MEMORY_ROWS = 4


@dataclass(frozen=True)
class ReferenceSetup:
    arch: ModelArch
    cluster: ClusterSpec
    global_batch: int
    rows: tuple  # (record, layout) pairs that are admissible layouts
    skipped: tuple  # (record, reason)


@dataclass(frozen=True)
class CalibrationResult:
    knobs: CostKnobs
    memory: MemoryCalibration
    memory_rows: tuple  # layout keys used for the memory fit
    fitted_rows: int
    rms_log_error: float


def reference_setup(records: Sequence[ReferenceRecord],
                    global_batch: Optional[int] = None) -> ReferenceSetup:
    """Model, cluster and admissible layouts for a single-configuration table."""
    configs = {(r.model_tag, r.seq_len, r.gpus) for r in records}
    if len(configs) != 1:
        raise ValueError(f"reference must describe one model/seq_len/gpus, got {sorted(configs)}")
    model, seq_len, gpus = configs.pop()
    arch = model_preset(model, seq_len)
    cluster = a100_cluster(gpus)
    gbs = global_batch or default_global_batch(seq_len)
    rows, skipped = [], []
    for r in records:
        try:
            layout = r.layout(gbs)
        except LayoutInvalid as exc:
            skipped.append((r, str(exc)))
            continue
        problems = validate_layout(arch, cluster, layout)
        if problems:
            skipped.append((r, "; ".join(problems)))
        else:
            rows.append((r, layout))
    return ReferenceSetup(arch, cluster, gbs, tuple(rows), tuple(skipped))


def select_memory_rows(pairs: Sequence[tuple[ReferenceRecord, ParallelLayout]],
                       limit: int = MAX_MEMORY_ROWS) -> list[tuple[ParallelLayout, bool]]:
    """Pick rows that bracket the OOM boundary along the micro-batch axis.

    Layouts are grouped by everything except mb, keeping the memory-lean
    variant (sequence parallelism on exactly when tp > 1).  In each group the
    largest fitting mb and the next OOM mb form a bracket; groups are taken
    in (pp, tp) order until ``limit`` rows are chosen.
    """
    groups: dict[tuple, list] = {}
    for record, layout in pairs:
        if layout.sequence_parallel != (layout.tp_size > 1):
            continue
        group = (layout.pp_size, layout.tp_size, layout.activation_checkpointing,
                 layout.rmsnorm_kernel, layout.attention_kernel)
        groups.setdefault(group, []).append((layout.micro_batch, record.oom, layout))
    chosen = []
    for group in sorted(groups, key=lambda g: tuple(str(x) for x in g)):
        members = sorted(groups[group], key=lambda m: m[0])
        fits = [m for m in members if not m[1]]
        ooms = [m for m in members if m[1]]
        if not fits or not ooms:
            continue
        fit = max(fits, key=lambda m: m[0])
        above = [m for m in ooms if m[0] > fit[0]]
        if not above:
            continue
        oom = min(above, key=lambda m: m[0])
        if len(chosen) + 2 > limit:
            break
        chosen += [(fit[2], False), (oom[2], True)]
    return chosen


def fit_throughput(arch: ModelArch, cluster: ClusterSpec,
                   rows: Sequence[tuple[ParallelLayout, float]],
                   base: Optional[CostKnobs] = None,
                   names: Sequence[str] = tuple(FIT_BOUNDS)) -> tuple[CostKnobs, float]:
    """Least squares on log step time; returns (knobs, rms log error)."""
    base = base or CostKnobs()
    if not rows:
        raise ValueError("no measured rows to fit")
    measured = np.log([t for _, t in rows])
    lower = np.log([FIT_BOUNDS[n][0] for n in names])
    upper = np.log([FIT_BOUNDS[n][1] for n in names])
    start = np.clip(np.log([getattr(base, n) for n in names]), lower, upper)

    def knobs_at(x):
        return replace(base, **{n: float(v) for n, v in zip(names, np.exp(x))})

    def residuals(x):
        knobs = knobs_at(x)
        predicted = [simulate_step(arch, cluster, layout, knobs)[0] for layout, _ in rows]
        return np.log(predicted) - measured

    fit = least_squares(residuals, start, bounds=(lower, upper))
    return knobs_at(fit.x), float(np.sqrt(np.mean(fit.fun ** 2)))


def calibrate(records: Sequence[ReferenceRecord], base: Optional[CostKnobs] = None,
              global_batch: Optional[int] = None) -> CalibrationResult:
    setup = reference_setup(records, global_batch)
    base = base or CostKnobs()
    memory_rows = select_memory_rows(setup.rows)
    if not memory_rows:
        raise ValueError("reference has no fit/OOM pair to calibrate memory against")
    mem = calibrate_memory(setup.arch, setup.cluster, memory_rows)
    timed = [(layout, r.step_time) for r, layout in setup.rows if not r.oom]
    knobs, rms = fit_throughput(setup.arch, setup.cluster, timed, base)
    knobs = replace(knobs, activation_coefficient=mem.activation_coefficient,
                    usable_vram_fraction=mem.usable_vram_fraction)
    return CalibrationResult(
        knobs=knobs, memory=mem,
        memory_rows=tuple(layout.key for layout, _ in memory_rows),
        fitted_rows=len(timed), rms_log_error=rms,
    )


def log_error(predicted: float, measured: float) -> float:
    return math.log(predicted / measured)
