"""Discrete-event simulation of the PipeDream 1F1B pipeline schedule.

Each stage executes a fixed op order: ``min(pp - s, m)`` warm-up forwards,
then alternating backward/forward pairs, then the remaining backwards.  An
op starts once its stage is free and its input has arrived.  Point-to-point
transfers block the sending stage for ``p2p_transfer`` seconds and do not
overlap compute.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from functools import partial
from operator import itemgetter
from typing import NamedTuple, Sequence, Union

import numpy as np

FWD, BWD, SEND, RECV = "fwd", "bwd", "send", "recv"
_KIND_ORDER = {FWD: 0, BWD: 1, SEND: 2, RECV: 3}
# (start, stage, micro_batch, order, kind, end) -> TraceEvent field order
_RAW_TO_EVENT = itemgetter(1, 2, 4, 0, 5)

Durations = Union[float, Sequence[float]]


@dataclass(frozen=True)
class StageTiming:
    """Per-micro-batch op durations; scalars apply to every stage."""

    forward: Durations
    backward: Durations
    p2p_transfer: float = 0.0

    def per_stage(self, pp: int) -> tuple[list[float], list[float]]:
        fwd = _expand(self.forward, pp, "forward")
        bwd = _expand(self.backward, pp, "backward")
        if min(fwd + bwd) < 0 or self.p2p_transfer < 0:
            raise ValueError("stage timings must be non-negative")
        return fwd, bwd


def _expand(value: Durations, pp: int, name: str) -> list[float]:
    if isinstance(value, (int, float)):
        return [float(value)] * pp
    values = [float(v) for v in value]
    if len(values) != pp:
        raise ValueError(f"{name} has {len(values)} entries for {pp} stages")
    return values


class TraceEvent(NamedTuple):
    stage: int
    micro_batch: int
    kind: str
    start: float
    end: float


_EVENT_DTYPE = np.dtype([("stage", np.int64), ("micro_batch", np.int64), ("kind", "U4"),
                         ("start", np.float64), ("end", np.float64)])
_new_event = partial(tuple.__new__, TraceEvent)  # TraceEvent._make without the Python frame


@dataclass(frozen=True)
class ScheduleTrace:
    pp: int
    num_micro_batches: int
    events: tuple[TraceEvent, ...]
    step_time: float
    idle_per_stage: tuple[float, ...]

    @property
    def bubble_fraction(self) -> float:
        if self.step_time == 0:
            return 0.0
        return sum(self.idle_per_stage) / (self.pp * self.step_time)

    def to_csv_rows(self) -> list[tuple]:
        return [(e.stage, e.micro_batch, e.kind, e.start, e.end) for e in self.events]


def stage_op_order(pp: int, m: int, stage: int) -> list[tuple[str, int]]:
    warmup = min(pp - stage, m)
    ops = [(FWD, i) for i in range(warmup)]
    for i in range(m - warmup):
        ops.append((BWD, i))
        ops.append((FWD, warmup + i))
    ops.extend((BWD, i) for i in range(m - warmup, m))
    return ops


def simulate_1f1b(pp: int, num_micro_batches: int, timing: StageTiming) -> ScheduleTrace:
    if pp < 1 or num_micro_batches < 1:
        raise ValueError("pp and num_micro_batches must be >= 1")
    m = num_micro_batches
    fwd_time, bwd_time = timing.per_stage(pp)
    p2p = timing.p2p_transfer
    orders = [stage_op_order(pp, m, s) for s in range(pp)]
    remaining = [2 * m] * pp
    cursor = [0] * pp
    busy = [False] * pp
    used = [0.0] * pp
    # time the input of each (stage, micro-batch) op is available, None until sent
    arrival = {FWD: [[None] * m for _ in range(pp)], BWD: [[None] * m for _ in range(pp)]}
    arrival[FWD][0] = [0.0] * m
    # where each op's output goes: (kind of the consuming op, its stage), or None
    # for the first stage's backward
    consumer = {FWD: [(FWD, s + 1) for s in range(pp - 1)] + [(BWD, pp - 1)],
                BWD: [None] + [(BWD, s - 1) for s in range(1, pp)]}
    sends = {kind: [c is not None and c[1] != s and p2p > 0 for s, c in enumerate(consumer[kind])]
             for kind in (FWD, BWD)}
    # stages that log a zero-duration recv before starting each kind of op
    receives = {FWD: [p2p > 0 and s > 0 for s in range(pp)],
                BWD: [p2p > 0 and s < pp - 1 for s in range(pp)]}
    durations = {FWD: fwd_time, BWD: bwd_time}
    order_of = {FWD: 0, BWD: 1}
    # raw events as (start, stage, micro_batch, kind order, kind, end): plain
    # tuples sort in the trace order without a key function
    raw: list[tuple] = []
    record = raw.append
    # heap entries: (time, stage, micro_batch, kind order, kind, start, compute end).
    # A blocking send starts the moment its compute op ends and nothing else
    # happens on the stage in between, so one entry covers both; it is keyed
    # as the send completion.
    queue: list[tuple] = []
    push, pop = heapq.heappush, heapq.heappop

    def dispatch(stage: int, now: float) -> None:
        # caller guarantees the stage is idle
        if not remaining[stage]:
            return
        kind, mb = orders[stage][cursor[stage]]
        ready = arrival[kind][stage][mb]
        if ready is None or ready > now:
            return
        if receives[kind][stage]:
            record((now, stage, mb, 3, RECV, now))
        end = now + durations[kind][stage]
        if sends[kind][stage]:
            push(queue, (end + p2p, stage, mb, 2, kind, now, end))
        else:
            push(queue, (end, stage, mb, order_of[kind], kind, now, end))
        busy[stage] = True
        cursor[stage] += 1
        remaining[stage] -= 1

    for s in range(pp):
        dispatch(s, 0.0)

    now = 0.0
    while queue:
        now, stage, mb, order, kind, start, end = pop(queue)
        record((start, stage, mb, order_of[kind], kind, end))
        if order == 2:
            record((end, stage, mb, 2, SEND, now))
        used[stage] += now - start
        busy[stage] = False
        target = consumer[kind][stage]
        if target is not None:
            # the output lands on the consumer as this stage frees up
            arrival[target[0]][target[1]][mb] = now
            if not busy[target[1]]:
                dispatch(target[1], now)
        if not busy[stage]:
            dispatch(stage, now)

    if any(remaining):
        raise RuntimeError("1F1B simulation stalled before completing all ops")

    raw.sort()
    events = tuple(map(_new_event, map(_RAW_TO_EVENT, raw)))
    # the queue pops in time order, so the last completion ends the step
    step_time = now
    idle = tuple(step_time - u for u in used)
    return ScheduleTrace(pp, m, events, step_time, idle)


def analytic_bubble_fraction(pp: int, m: int) -> float:
    if pp < 1 or m < 1:
        raise ValueError("pp and m must be >= 1")
    return (pp - 1) / (m + pp - 1)


def check_trace(trace: ScheduleTrace) -> list[str]:
    """Replay a trace against the 1F1B dependency rules; returns violations."""
    pp, m = trace.pp, trace.num_micro_batches
    if not trace.events:
        return ["missing op: trace has no events"]
    table = np.array(list(trace.events), dtype=_EVENT_DTYPE)
    stage, mb, kind, start, end = (table[name] for name in TraceEvent._fields)
    problems = [f"negative duration {trace.events[i]}" for i in np.flatnonzero(end < start)]

    spans = {}
    for name in (FWD, BWD):
        sel = np.flatnonzero(kind == name)
        slot = stage[sel] * m + mb[sel]
        in_range = (stage[sel] >= 0) & (stage[sel] < pp) & (mb[sel] >= 0) & (mb[sel] < m)
        problems += [f"op out of range {trace.events[i]}" for i in sel[~in_range]]
        sel, slot = sel[in_range], slot[in_range]
        count = np.bincount(slot, minlength=pp * m)
        problems += [f"duplicate op {(name, int(k) // m, int(k) % m)}" for k in np.flatnonzero(count > 1)]
        problems += [f"missing op {(name, int(k) // m, int(k) % m)}" for k in np.flatnonzero(count == 0)]
        first = np.full(pp * m, -1)
        first[slot[::-1]] = sel[::-1]  # earliest listed event per slot
        spans[name] = first.reshape(pp, m)
    if problems:
        return problems

    f_start, f_end = start[spans[FWD]], end[spans[FWD]]
    b_start, b_end = start[spans[BWD]], end[spans[BWD]]

    # ops with a duration never overlap on one stage
    timed = np.flatnonzero(end > start)
    ordered = timed[np.lexsort((start[timed], stage[timed]))]
    clash = (stage[ordered[1:]] == stage[ordered[:-1]]) & (start[ordered[1:]] < end[ordered[:-1]])
    for i in np.flatnonzero(clash):
        s = int(stage[ordered[i]])
        problems.append(f"overlap on stage {s}: {trace.events[ordered[i]]} / {trace.events[ordered[i + 1]]}")

    for s, i in zip(*np.nonzero(f_start[1:] < f_end[:-1])):
        problems.append(f"fwd {i} on stage {s + 1} before upstream fwd finished")
    for s, i in zip(*np.nonzero(b_start < f_end)):
        problems.append(f"bwd {i} on stage {s} before its fwd finished")
    for s, i in zip(*np.nonzero(b_start[:-1] < b_end[1:])):
        problems.append(f"bwd {i} on stage {s} before downstream bwd finished")

    # resident activations: forwards started minus backwards finished; a
    # backward that ends as a forward starts frees its memory first
    times = np.concatenate([f_start, b_end], axis=1)
    delta = np.concatenate([np.ones((pp, m)), -np.ones((pp, m))], axis=1)
    order = np.lexsort((delta, times), axis=1)
    live = np.cumsum(np.take_along_axis(delta, order, axis=1), axis=1).max(axis=1)
    for s in np.flatnonzero(live > pp - np.arange(pp)):
        problems.append(f"stage {s} holds {int(live[s])} activations (> {pp - s})")
    if trace.step_time < end.max():
        problems.append("step_time earlier than last event")
    return problems
