"""Analytical per-GPU peak memory model.

Static memory follows bf16 mixed precision with ZeRO-1: 2 bytes/param of
weights, 2 bytes/param of gradients and 12 bytes/param of fp32 optimizer
state (master copy, Adam moments) sharded across the data-parallel group.

Activation memory is a per-layer byte count for a Llama block, in the style
of the sequence-parallel/selective-recompute accounting, multiplied by the
number of micro-batches a 1F1B stage keeps in flight.  A scalar
``activation_coefficient`` absorbs allocator and framework effects that the
analytical count cannot see.
"""

from __future__ import annotations

from dataclasses import dataclass

from .core import ClusterSpec, GiB, ModelArch, ParallelLayout, layer_parameters

WEIGHT_BYTES = 2
GRAD_BYTES = 2
OPTIMIZER_BYTES = 12
ACT_BYTES = 2
# bf16 logits, fp32 upcast, softmax and both gradient copies of the loss; the
# loss runs on the full gathered vocabulary, so this term is not divided by tp
LOGIT_BYTES = 16
# unfused RMSNorm keeps an fp32 upcast of its input (4 B) and the normalised
# bf16 output for the weight gradient (2 B); the fused kernel keeps neither
UNFUSED_NORM_BYTES = 6
DEFAULT_OVERHEAD_BYTES = 1 * GiB  # CUDA context, NCCL and cuBLAS workspaces


@dataclass(frozen=True)
class MemoryEstimate:
    weight_bytes: float
    gradient_bytes: float
    optimizer_bytes: float
    activation_bytes: float = 0.0
    overhead_bytes: float = 0.0
    stage: int = 0

    @property
    def total_bytes(self) -> float:
        return (self.weight_bytes + self.gradient_bytes + self.optimizer_bytes
                + self.activation_bytes + self.overhead_bytes)


def stage_parameters(arch: ModelArch, layout: ParallelLayout, stage: int = 0) -> float:
    """Parameters held by one tensor-parallel rank of ``stage``.

    Embeddings live on the first stage and the output head (plus final norm)
    on the last; with tied embeddings and pp > 1 both ends keep a copy.
    """
    tp, pp = layout.tp_size, layout.pp_size
    layers = arch.num_layers // pp
    params = layers * layer_parameters(arch) / tp
    table = arch.vocab_size * arch.hidden_size / tp
    if stage == 0:
        params += table
    if stage == pp - 1:
        params += arch.hidden_size
        if not arch.tied_embeddings or pp > 1:
            params += table
    return params


def static_memory(arch: ModelArch, layout: ParallelLayout, stage: int = 0) -> MemoryEstimate:
    params = stage_parameters(arch, layout, stage)
    return MemoryEstimate(
        weight_bytes=WEIGHT_BYTES * params,
        gradient_bytes=GRAD_BYTES * params,
        optimizer_bytes=OPTIMIZER_BYTES * params / layout.dp_size,
        stage=stage,
    )


def layer_activation_bytes(arch: ModelArch, layout: ParallelLayout) -> float:
    """Bytes stored for backward by one transformer layer and one micro-batch."""
    s, b, h = arch.seq_len, layout.micro_batch, arch.hidden_size
    f, a, t = arch.ffn_hidden_size, arch.num_heads, layout.tp_size
    sbh = s * b * h
    # norm inputs (2), QKV input, MLP input: replicated across tp unless sequence-parallel
    replicated = 4 * sbh
    # q, k, v, attention output, then gate, up and gated product of SwiGLU
    sharded = 4 * sbh + 3 * s * b * f
    if not layout.flash_attention:
        # softmax probabilities plus the score matrix kept for the backward pass
        sharded += a * s * s * b * 2
    replicated *= ACT_BYTES
    if not layout.rmsnorm_kernel:
        replicated += 2 * UNFUSED_NORM_BYTES * sbh
    if layout.sequence_parallel:
        replicated /= t
    return replicated + ACT_BYTES * sharded / t


def in_flight_micro_batches(layout: ParallelLayout, stage: int = 0) -> int:
    return min(layout.pp_size - stage, layout.accumulation_steps)


def activation_memory(arch: ModelArch, layout: ParallelLayout, stage: int = 0,
                      coefficient: float = 1.0) -> float:
    s, b, h, t = arch.seq_len, layout.micro_batch, arch.hidden_size, layout.tp_size
    layers = arch.num_layers // layout.pp_size
    full_layer = layer_activation_bytes(arch, layout)
    if layout.activation_checkpointing:
        boundary = ACT_BYTES * s * b * h
        if layout.sequence_parallel:
            boundary /= t
        # checkpoints for every resident micro-batch plus the layer being
        # recomputed, whose input is already one of the checkpoints
        per_micro = layers * boundary
        working = full_layer - boundary
    else:
        per_micro = layers * full_layer
        working = 0.0
    total = in_flight_micro_batches(layout, stage) * per_micro + working
    total *= coefficient
    if stage == layout.pp_size - 1:
        total += logit_bytes(arch, layout)
    return total


def logit_bytes(arch: ModelArch, layout: ParallelLayout) -> float:
    return LOGIT_BYTES * arch.seq_len * layout.micro_batch * arch.vocab_size


def stage_memory(arch: ModelArch, layout: ParallelLayout, stage: int = 0,
                 coefficient: float = 1.0,
                 overhead_bytes: float = DEFAULT_OVERHEAD_BYTES) -> MemoryEstimate:
    static = static_memory(arch, layout, stage)
    return MemoryEstimate(
        static.weight_bytes, static.gradient_bytes, static.optimizer_bytes,
        activation_bytes=activation_memory(arch, layout, stage, coefficient),
        overhead_bytes=overhead_bytes, stage=stage,
    )


def memory_by_stage(arch: ModelArch, layout: ParallelLayout, coefficient: float = 1.0,
                    overhead_bytes: float = DEFAULT_OVERHEAD_BYTES) -> list[MemoryEstimate]:
    return [stage_memory(arch, layout, s, coefficient, overhead_bytes)
            for s in range(layout.pp_size)]


def peak_memory(arch: ModelArch, layout: ParallelLayout, coefficient: float = 1.0,
                overhead_bytes: float = DEFAULT_OVERHEAD_BYTES) -> MemoryEstimate:
    return max(memory_by_stage(arch, layout, coefficient, overhead_bytes),
               key=lambda m: m.total_bytes)


def predict_feasible(arch: ModelArch, cluster: ClusterSpec, layout: ParallelLayout,
                     coefficient: float = 1.0,
                     overhead_bytes: float = DEFAULT_OVERHEAD_BYTES) -> tuple[MemoryEstimate, bool]:
    peak = peak_memory(arch, layout, coefficient, overhead_bytes)
    return peak, peak.total_bytes <= cluster.usable_vram_bytes


@dataclass(frozen=True)
class MemoryCalibration:
    activation_coefficient: float
    usable_vram_fraction: float
    margin: float


def _coefficient_threshold(arch: ModelArch, layout: ParallelLayout, stage: int,
                           budget: float, overhead_bytes: float) -> float:
    """Activation coefficient at which ``stage`` exactly fills ``budget``."""
    mem = stage_memory(arch, layout, stage, 1.0, overhead_bytes)
    scalable = activation_memory(arch, layout, stage, 1.0)
    if stage == layout.pp_size - 1:
        scalable -= logit_bytes(arch, layout)
    fixed = mem.total_bytes - scalable
    return (budget - fixed) / scalable


def calibrate_memory(arch: ModelArch, cluster: ClusterSpec,
                     rows: list[tuple[ParallelLayout, bool]],
                     fractions: tuple[float, ...] = (0.86, 0.88, 0.90, 0.92, 0.94, 0.96, 0.98, 1.0),
                     overhead_bytes: float = DEFAULT_OVERHEAD_BYTES) -> MemoryCalibration:
    """Fit the activation coefficient and usable VRAM fraction to labelled rows.

    ``rows`` pairs a layout with whether it ran out of memory.  For each
    candidate fraction the rows bound the coefficient to an interval; the
    fraction with the widest (log-)interval wins and the coefficient is its
    geometric midpoint.
    """
    best = None
    for fraction in fractions:
        budget = cluster.vram_bytes_per_gpu * fraction
        lo, hi = 0.0, float("inf")
        for layout, oom in rows:
            bounds = [_coefficient_threshold(arch, layout, s, budget, overhead_bytes)
                      for s in range(layout.pp_size)]
            if oom:
                # some stage must overflow, so the coefficient exceeds the smallest bound
                lo = max(lo, min(bounds))
            else:
                hi = min(hi, min(bounds))
        lo = max(lo, 1e-3)
        if hi <= lo:
            continue
        if hi == float("inf"):
            coefficient, margin = 2 * lo, 2.0
        else:
            coefficient, margin = (lo * hi) ** 0.5, hi / lo
        if best is None or margin > best.margin:
            best = MemoryCalibration(coefficient, fraction, margin)
    if best is None:
        raise ValueError("no activation coefficient separates the labelled rows")
    return best
