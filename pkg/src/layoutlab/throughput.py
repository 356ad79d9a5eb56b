"""Layout -> step time and MFU.

GEMM and attention time follow the FLOP terms of the MFU accounting
(``6 * params`` per token for the weights a stage executes, ``12 * L *
hidden * T`` for attention) at a calibrated fraction of peak.  Memory-bound
elementwise work, tensor-parallel all-reduces, pipeline transfers and the data-parallel
gradient reduction come on top.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from . import memory
from .core import (ATTENTION_KERNELS, ClusterSpec, ModelArch, ParallelLayout,
                   count_parameters, embedding_parameters, layer_parameters,
                   validate_layout)
from .flops import MfuInputs, mfu_from_step_time
from .pipeline import StageTiming, simulate_1f1b

ACT_BYTES = 2
# unfused RMSNorm: square, mean, rsqrt, two multiplies, dtype casts
UNFUSED_NORM_PASSES = 8


def _default_attention_efficiency() -> dict[str, float]:
    # throughput of each attention flavour relative to the GEMM rate
    return {"naive": 0.12, "megatron_fused": 0.25, "flash1": 0.35, "flash2": 1.0}


@dataclass(frozen=True)
class CostKnobs:
    """Free parameters of the cost model.

    Defaults are the rounded result of ``layoutlab calibrate`` against the
    bundled 13B/2k table (see README); ``usable_vram_fraction`` overrides the
    cluster's value when set.
    """

    matmul_efficiency: float = 0.74
    attention_efficiency: dict = field(default_factory=_default_attention_efficiency)
    rmsnorm_kernel_speedup: float = 2.0
    allreduce_efficiency: float = 0.31
    network_efficiency: float = 1.0
    recompute_factor: float = 1.0
    collective_latency: float = 22e-6
    activation_coefficient: float = 1.36
    usable_vram_fraction: Optional[float] = 1.0

    def __post_init__(self) -> None:
        for name in ("matmul_efficiency", "rmsnorm_kernel_speedup", "allreduce_efficiency",
                     "network_efficiency"):
            value = getattr(self, name)
            if not 0 < value <= 2:
                raise ValueError(f"{name} must be in (0, 2], got {value!r}")
        if set(self.attention_efficiency) != set(ATTENTION_KERNELS):
            raise ValueError(f"attention_efficiency needs keys {ATTENTION_KERNELS}")
        if not all(0 < v <= 2 for v in self.attention_efficiency.values()):
            raise ValueError("attention efficiencies must be in (0, 2]")
        if min(self.recompute_factor, self.collective_latency) < 0:
            raise ValueError("recompute_factor and collective_latency must be >= 0")
        if self.activation_coefficient <= 0:
            raise ValueError("activation_coefficient must be positive")
        if self.usable_vram_fraction is not None and not 0 < self.usable_vram_fraction <= 1:
            raise ValueError("usable_vram_fraction must be in (0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "CostKnobs":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown knob fields: {sorted(unknown)}")
        data = dict(data)
        if "attention_efficiency" in data:
            merged = _default_attention_efficiency()
            merged.update(data["attention_efficiency"])
            data["attention_efficiency"] = merged
        return cls(**data)

    @classmethod
    def load(cls, path) -> "CostKnobs":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    def effective_cluster(self, cluster: ClusterSpec) -> ClusterSpec:
        if self.usable_vram_fraction is None:
            return cluster
        return replace(cluster, usable_vram_fraction=self.usable_vram_fraction)


@dataclass(frozen=True)
class PerfEstimate:
    layout: ParallelLayout
    feasible: bool
    peak_mem_bytes: float
    step_time: Optional[float] = None
    mfu: Optional[float] = None
    tokens_per_second: Optional[float] = None
    bubble_fraction: Optional[float] = None
    breakdown: dict = field(default_factory=dict)
    violations: tuple = ()


def ring_allreduce_time(nbytes: float, ranks: int, bandwidth: float, latency: float = 0.0) -> float:
    """Ring all-reduce over ``ranks`` peers at an effective per-link ``bandwidth``."""
    if ranks <= 1 or nbytes <= 0:
        return 0.0
    volume = 2 * (ranks - 1) / ranks * nbytes
    return volume / bandwidth + latency


def link_bandwidth(cluster: ClusterSpec, knobs: CostKnobs, intra_node: bool) -> float:
    """Achieved collective bandwidth over NVLink or the inter-node network."""
    if intra_node:
        return cluster.intra_node_bandwidth * knobs.allreduce_efficiency
    return cluster.inter_node_bandwidth * knobs.network_efficiency


# Megatron rank order: tp fastest, then dp, then pp.
def tp_intra_node(layout: ParallelLayout, cluster: ClusterSpec) -> bool:
    return layout.tp_size <= cluster.gpus_per_node


def dp_intra_node(layout: ParallelLayout, cluster: ClusterSpec) -> bool:
    # the dp group spans tp * dp consecutive ranks
    return layout.tp_size * layout.dp_size <= cluster.gpus_per_node


def p2p_intra_node(layout: ParallelLayout, cluster: ClusterSpec) -> bool:
    # adjacent pipeline stages are tp * dp ranks apart
    return layout.tp_size * layout.dp_size < cluster.gpus_per_node


def communication_time(arch: ModelArch, layout: ParallelLayout, cluster: ClusterSpec,
                       knobs: Optional[CostKnobs] = None) -> tuple[float, float]:
    """(forward tensor-parallel time per layer per micro-batch, per-step gradient reduction)."""
    knobs = knobs or CostKnobs()
    activation = layout.micro_batch * arch.seq_len * arch.hidden_size * ACT_BYTES
    # attention and MLP outputs each need one all-reduce (or reduce-scatter +
    # all-gather under sequence parallelism: same volume)
    tp_bw = link_bandwidth(cluster, knobs, tp_intra_node(layout, cluster))
    tp_layer = 2 * ring_allreduce_time(activation, layout.tp_size, tp_bw,
                                       knobs.collective_latency)
    grad_bytes = 2 * max(memory.stage_parameters(arch, layout, s) for s in range(layout.pp_size))
    dp_bw = link_bandwidth(cluster, knobs, dp_intra_node(layout, cluster))
    dp = ring_allreduce_time(grad_bytes, layout.dp_size, dp_bw, knobs.collective_latency)
    return tp_layer, dp


def _stage_model_flops(arch: ModelArch, layout: ParallelLayout, stage: int) -> tuple[float, float]:
    """Per-token (weight, attention) training FLOPs executed by one stage.

    The input embedding is a gather and costs no GEMM time, so the whole
    embedding term of the FLOP count is charged to the last stage, where the
    output head and the vocabulary-wide loss run.  Summed over stages this is
    exactly the MFU numerator.
    """
    pp = layout.pp_size
    layers = arch.num_layers // pp
    params = layers * layer_parameters(arch)
    if stage == pp - 1:
        params += embedding_parameters(arch) + arch.hidden_size
    attention = 12 * layers * arch.hidden_size * arch.seq_len
    return 6 * params, attention


def _elementwise_seconds(arch: ModelArch, layout: ParallelLayout, cluster: ClusterSpec,
                         knobs: CostKnobs, layers: int) -> float:
    """Forward memory-bound time for norms, residual adds and the SwiGLU gate."""
    tokens = layout.micro_batch * arch.seq_len
    t = layout.tp_size
    hidden_tensor = tokens * arch.hidden_size * ACT_BYTES
    norm_passes = UNFUSED_NORM_PASSES
    if layout.rmsnorm_kernel:
        norm_passes /= knobs.rmsnorm_kernel_speedup
    norm_bytes = 2 * norm_passes * hidden_tensor
    residual_bytes = 2 * 3 * hidden_tensor
    replicated = norm_bytes + residual_bytes
    if layout.sequence_parallel:
        replicated /= t
    swiglu_bytes = 3 * tokens * arch.ffn_hidden_size * ACT_BYTES / t
    return layers * (replicated + swiglu_bytes) / cluster.hbm_bandwidth


@dataclass(frozen=True)
class StageCost:
    compute: float  # forward GEMM + attention seconds
    elementwise: float
    tp_comm: float


def stage_costs(arch: ModelArch, layout: ParallelLayout, cluster: ClusterSpec,
                knobs: CostKnobs) -> list[StageCost]:
    tokens = layout.micro_batch * arch.seq_len
    rate = cluster.peak_matmul_flops_per_gpu * knobs.matmul_efficiency * layout.tp_size
    attn_rate = rate * knobs.attention_efficiency[layout.attention_kernel]
    layers = arch.num_layers // layout.pp_size
    tp_layer, _ = communication_time(arch, layout, cluster, knobs)
    costs = []
    for s in range(layout.pp_size):
        weight_flops, attn_flops = _stage_model_flops(arch, layout, s)
        compute = tokens * (weight_flops / rate + attn_flops / attn_rate) / 3
        elementwise = _elementwise_seconds(arch, layout, cluster, knobs, layers)
        costs.append(StageCost(compute, elementwise, layers * tp_layer))
    return costs


def stage_compute_time(arch: ModelArch, layout: ParallelLayout, cluster: ClusterSpec,
                       knobs: Optional[CostKnobs] = None) -> StageTiming:
    knobs = knobs or CostKnobs()
    forward, backward = [], []
    for cost in stage_costs(arch, layout, cluster, knobs):
        fwd = cost.compute + cost.elementwise + cost.tp_comm
        bwd = 2 * fwd
        if layout.activation_checkpointing:
            bwd += knobs.recompute_factor * fwd
        forward.append(fwd)
        backward.append(bwd)
    activation = layout.micro_batch * arch.seq_len * arch.hidden_size * ACT_BYTES
    p2p = 0.0
    if layout.pp_size > 1:
        bandwidth = link_bandwidth(cluster, knobs, p2p_intra_node(layout, cluster))
        p2p = activation / bandwidth + knobs.collective_latency
    return StageTiming(tuple(forward), tuple(backward), p2p)


def simulate_step(arch: ModelArch, cluster: ClusterSpec, layout: ParallelLayout,
                  knobs: CostKnobs):
    """Timing path of :func:`estimate` without the memory check.

    Returns ``(step_time, trace, timing, dp_time)``.
    """
    timing = stage_compute_time(arch, layout, cluster, knobs)
    trace = simulate_1f1b(layout.pp_size, layout.accumulation_steps, timing)
    _, dp_time = communication_time(arch, layout, cluster, knobs)
    return trace.step_time + dp_time, trace, timing, dp_time


def estimate(arch: ModelArch, cluster: ClusterSpec, layout: ParallelLayout,
             knobs: Optional[CostKnobs] = None) -> PerfEstimate:
    knobs = knobs or CostKnobs()
    cluster = knobs.effective_cluster(cluster)
    problems = validate_layout(arch, cluster, layout)
    if problems:
        return PerfEstimate(layout, False, math.nan, violations=tuple(problems))
    peak, feasible = memory.predict_feasible(arch, cluster, layout,
                                             knobs.activation_coefficient)
    if not feasible:
        return PerfEstimate(layout, False, peak.total_bytes)

    step_time, trace, timing, dp_time = simulate_step(arch, cluster, layout, knobs)
    m = layout.accumulation_steps
    costs = stage_costs(arch, layout, cluster, knobs)
    busiest = max(range(layout.pp_size), key=lambda s: timing.forward[s] + timing.backward[s])
    cost = costs[busiest]
    recompute = (knobs.recompute_factor * timing.forward[busiest]
                 if layout.activation_checkpointing else 0.0)
    breakdown = {
        "compute": m * 3 * (cost.compute + cost.elementwise),
        "tp-comm": m * 3 * cost.tp_comm,
        "recompute": m * recompute,
        "bubble": trace.idle_per_stage[busiest],
        "dp-comm": dp_time,
    }
    mfu = mfu_from_step_time(MfuInputs(
        step_time=step_time, global_batch=layout.global_batch, seq_len=arch.seq_len,
        world_size=cluster.world_size, peak_flops=cluster.peak_matmul_flops_per_gpu,
        param_count=count_parameters(arch), num_layers=arch.num_layers,
        hidden_size=arch.hidden_size,
    ))
    return PerfEstimate(
        layout=layout, feasible=True, peak_mem_bytes=peak.total_bytes,
        step_time=step_time, mfu=mfu,
        tokens_per_second=layout.global_batch * arch.seq_len / step_time,
        bubble_fraction=trace.bubble_fraction, breakdown=breakdown,
    )


def _tie_key(est: PerfEstimate) -> tuple:
    lay = est.layout
    return (lay.tp_size, lay.pp_size, lay.micro_batch)


def rank_layouts(estimates: list[PerfEstimate]) -> list[PerfEstimate]:
    """Feasible estimates by descending MFU (ties: lower tp, pp, mb); infeasible ones after, in input order."""
    feasible = [e for e in estimates if e.feasible]
    infeasible = [e for e in estimates if not e.feasible]
    feasible.sort(key=lambda e: (-e.mfu, *_tie_key(e)))
    return feasible + infeasible
