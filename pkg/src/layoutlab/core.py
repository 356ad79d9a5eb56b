"""Domain types, layout validity rules and sweep-space enumeration."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

ATTENTION_KERNELS = ("naive", "megatron_fused", "flash1", "flash2")
FLASH_KERNELS = ("flash1", "flash2")

GiB = 1024**3


class LayoutInvalid(ValueError):
    """Raised when parallelism arithmetic cannot produce an admissible layout."""


@dataclass(frozen=True)
class ModelArch:
    name: str
    num_layers: int
    hidden_size: int
    num_heads: int
    vocab_size: int
    seq_len: int
    mlp_expansion: float
    tied_embeddings: bool = False

    def __post_init__(self) -> None:
        if self.num_layers < 0:
            raise ValueError("num_layers must be >= 0")
        for name in ("hidden_size", "num_heads", "vocab_size", "seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.mlp_expansion <= 0:
            raise ValueError("mlp_expansion must be positive")
        if self.hidden_size % self.num_heads:
            raise ValueError(
                f"hidden_size {self.hidden_size} is not num_heads x head_dim "
                f"(num_heads={self.num_heads})"
            )

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    @property
    def ffn_hidden_size(self) -> int:
        return round(self.mlp_expansion * self.hidden_size)

    def with_seq_len(self, seq_len: int) -> "ModelArch":
        return ModelArch(
            self.name, self.num_layers, self.hidden_size, self.num_heads,
            self.vocab_size, seq_len, self.mlp_expansion, self.tied_embeddings,
        )


@dataclass(frozen=True)
class ClusterSpec:
    num_nodes: int
    gpus_per_node: int = 8
    peak_matmul_flops_per_gpu: float = 312e12
    vram_bytes_per_gpu: float = 80 * GiB
    usable_vram_fraction: float = 0.92
    intra_node_bandwidth: float = 300e9  # NVLink3, per direction
    inter_node_bandwidth: float = 25e9  # one HDR 200Gb/s NIC per GPU
    hbm_bandwidth: float = 2.0e12

    def __post_init__(self) -> None:
        if self.num_nodes <= 0 or self.gpus_per_node <= 0:
            raise ValueError("world size must be positive")
        if not 0 < self.usable_vram_fraction <= 1:
            raise ValueError("usable_vram_fraction must be in (0, 1]")
        for name in ("peak_matmul_flops_per_gpu", "vram_bytes_per_gpu",
                     "intra_node_bandwidth", "inter_node_bandwidth", "hbm_bandwidth"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def world_size(self) -> int:
        return self.num_nodes * self.gpus_per_node

    @property
    def usable_vram_bytes(self) -> float:
        return self.vram_bytes_per_gpu * self.usable_vram_fraction


@dataclass(frozen=True)
class ParallelLayout:
    tp_size: int
    pp_size: int
    dp_size: int
    micro_batch: int
    global_batch: int
    accumulation_steps: int
    activation_checkpointing: bool = False
    sequence_parallel: bool = False
    rmsnorm_kernel: bool = False
    attention_kernel: str = "flash2"

    @property
    def flash_attention(self) -> bool:
        return self.attention_kernel in FLASH_KERNELS

    @property
    def model_parallel_size(self) -> int:
        return self.tp_size * self.pp_size

    @property
    def key(self) -> tuple:
        """Join key used against reference tables."""
        return (self.micro_batch, self.tp_size, self.pp_size, self.sequence_parallel,
                self.activation_checkpointing, self.rmsnorm_kernel, self.attention_kernel)

    @classmethod
    def derive(cls, world_size: int, tp: int, pp: int, micro_batch: int,
               global_batch: int, **flags) -> "ParallelLayout":
        """Build a layout, deriving data-parallel size and accumulation steps."""
        dp = derive_data_parallel(world_size, tp, pp)
        steps = derive_accumulation_steps(global_batch, dp, micro_batch)
        return cls(tp, pp, dp, micro_batch, global_batch, steps, **flags)

    def describe(self) -> str:
        flags = []
        if self.activation_checkpointing:
            flags.append("ckpt")
        if self.sequence_parallel:
            flags.append("sp")
        if self.rmsnorm_kernel:
            flags.append("rmsnorm")
        flags.append(self.attention_kernel)
        return (f"mb={self.micro_batch} tp={self.tp_size} pp={self.pp_size} "
                f"dp={self.dp_size} [{','.join(flags)}]")


@dataclass(frozen=True)
class SweepSpec:
    arch: ModelArch
    cluster: ClusterSpec
    global_batch: int
    tp_options: tuple[int, ...]
    pp_options: tuple[int, ...]
    mb_options: tuple[int, ...]
    checkpointing_options: tuple[bool, ...] = (False,)
    seq_parallel_options: tuple[bool, ...] = (False,)
    kernel_options: tuple[bool, ...] = (False,)
    attention_kernels: tuple[str, ...] = ("flash2",)

    def __post_init__(self) -> None:
        if self.global_batch <= 0:
            raise ValueError("global_batch must be positive")
        for name in ("tp_options", "pp_options", "mb_options", "checkpointing_options",
                     "seq_parallel_options", "kernel_options", "attention_kernels"):
            opts = getattr(self, name)
            if not opts:
                raise ValueError(f"{name} must be non-empty")
            # normalise lists coming from JSON into sorted, duplicate-free tuples
            object.__setattr__(self, name, tuple(sorted(set(opts), key=_option_order)))
        for kernel in self.attention_kernels:
            if kernel not in ATTENTION_KERNELS:
                raise ValueError(f"unknown attention kernel {kernel!r}")


def _option_order(value):
    if isinstance(value, str):
        return (0, ATTENTION_KERNELS.index(value) if value in ATTENTION_KERNELS else 99, value)
    return (0, value, "")


def derive_data_parallel(world_size: int, tp: int, pp: int) -> int:
    if min(world_size, tp, pp) <= 0:
        raise LayoutInvalid("world_size, tp and pp must be positive")
    if world_size % (tp * pp):
        raise LayoutInvalid(f"tp*pp={tp * pp} does not divide world size {world_size}")
    return world_size // (tp * pp)


def derive_accumulation_steps(global_batch: int, dp: int, mb: int) -> int:
    if min(global_batch, dp, mb) <= 0:
        raise LayoutInvalid("global_batch, dp and mb must be positive")
    if global_batch % (dp * mb):
        raise LayoutInvalid(
            f"dp*mb={dp * mb} does not divide global batch {global_batch}"
        )
    return global_batch // (dp * mb)


def validate_layout(arch: ModelArch, cluster: ClusterSpec, layout: ParallelLayout) -> list[str]:
    """Return human-readable rule violations; an empty list means admissible."""
    problems = []
    if min(layout.tp_size, layout.pp_size, layout.dp_size, layout.micro_batch,
           layout.global_batch) <= 0:
        problems.append("parallel sizes and batch sizes must be positive")
        return problems
    if arch.num_heads % layout.tp_size:
        problems.append(
            f"heads not divisible by tp ({arch.num_heads} heads, tp={layout.tp_size})"
        )
    if arch.num_layers % layout.pp_size:
        problems.append(
            f"layers not divisible by pp ({arch.num_layers} layers, pp={layout.pp_size})"
        )
    product = layout.tp_size * layout.pp_size * layout.dp_size
    if product != cluster.world_size:
        problems.append(f"tp*pp*dp={product} != world size {cluster.world_size}")
    per_pass = layout.dp_size * layout.micro_batch
    if layout.global_batch % per_pass:
        problems.append(f"dp*mb={per_pass} does not divide global batch {layout.global_batch}")
    elif layout.accumulation_steps != layout.global_batch // per_pass:
        problems.append(
            f"accumulation_steps={layout.accumulation_steps} != "
            f"global_batch/(dp*mb)={layout.global_batch // per_pass}"
        )
    if layout.activation_checkpointing and layout.rmsnorm_kernel:
        problems.append("activation checkpointing cannot be combined with the RMSNorm kernel")
    if layout.attention_kernel not in ATTENTION_KERNELS:
        problems.append(f"unknown attention kernel {layout.attention_kernel!r}")
    return problems


def layer_parameters(arch: ModelArch) -> int:
    h, f = arch.hidden_size, arch.ffn_hidden_size
    attention = 4 * h * h
    mlp = 3 * h * f
    norms = 2 * h
    return attention + mlp + norms


def embedding_parameters(arch: ModelArch) -> int:
    """Input embedding plus output head (shared when tied)."""
    table = arch.vocab_size * arch.hidden_size
    return table if arch.tied_embeddings else 2 * table


def count_parameters(arch: ModelArch) -> int:
    final_norm = arch.hidden_size
    return arch.num_layers * layer_parameters(arch) + embedding_parameters(arch) + final_norm


def iter_candidates(spec: SweepSpec) -> Iterator[tuple]:
    """Raw option tuples of the Cartesian product, minus checkpointing+RMSNorm-kernel."""
    for combo in itertools.product(
        spec.tp_options, spec.pp_options, spec.mb_options, spec.checkpointing_options,
        spec.seq_parallel_options, spec.kernel_options, spec.attention_kernels,
    ):
        _, _, _, ckpt, _, kernel, _ = combo
        if ckpt and kernel:
            continue
        yield combo


def enumerate_layouts(spec: SweepSpec) -> list[ParallelLayout]:
    layouts = []
    world = spec.cluster.world_size
    for tp, pp, mb, ckpt, sp, kernel, attn in iter_candidates(spec):
        try:
            layout = ParallelLayout.derive(
                world, tp, pp, mb, spec.global_batch,
                activation_checkpointing=ckpt, sequence_parallel=sp,
                rmsnorm_kernel=kernel, attention_kernel=attn,
            )
        except LayoutInvalid:
            continue
        if not validate_layout(spec.arch, spec.cluster, layout):
            layouts.append(layout)
    return layouts


# Presets. Llama dims follow the public Llama-1 configurations with the
# 128k vocabulary; Megatron-LM GPT dims follow the published table
# (standard 4h MLP, expressed here as an equal-size three-matrix MLP).

def swiglu_ffn_size(hidden: int, multiple_of: int = 256) -> int:
    return multiple_of * math.ceil(8 * hidden / 3 / multiple_of)


def _llama(name: str, layers: int, hidden: int, heads: int, seq_len: int) -> ModelArch:
    return ModelArch(name, layers, hidden, heads, 128_000, seq_len,
                     swiglu_ffn_size(hidden) / hidden)


def _megatron(name: str, layers: int, hidden: int, heads: int) -> ModelArch:
    return ModelArch(name, layers, hidden, heads, 51_200, 2048, 8 / 3, tied_embeddings=True)


_PRESETS = {
    "llama-13b": lambda seq: _llama("llama-13b", 40, 5120, 40, seq),
    "llama-30b": lambda seq: _llama("llama-30b", 60, 6656, 52, seq),
    "llama-65b": lambda seq: _llama("llama-65b", 80, 8192, 64, seq),
    "megatron-18b": lambda seq: _megatron("megatron-18b", 40, 6144, 48).with_seq_len(seq),
    "megatron-39b": lambda seq: _megatron("megatron-39b", 48, 8192, 64).with_seq_len(seq),
    "megatron-76b": lambda seq: _megatron("megatron-76b", 60, 10240, 80).with_seq_len(seq),
}

PRESET_NAMES = tuple(_PRESETS)

HARDWARE_PEAK_FLOPS = {"a100": 312e12, "h100": 989.4e12, "rtx3090": 35.58e12}


def default_global_batch(seq_len: int) -> int:
    """Global batch (sequences) used by the bundled sweeps: 2048 at 2k context, 512 beyond."""
    return 2048 if seq_len <= 2048 else 512


def model_preset(name: str, seq_len: int = 2048) -> ModelArch:
    try:
        return _PRESETS[name.lower()](seq_len)
    except KeyError:
        raise KeyError(f"unknown model preset {name!r}; choose from {', '.join(PRESET_NAMES)}")


def a100_cluster(num_gpus: int, **overrides) -> ClusterSpec:
    """DGX-A100 style cluster: 8 GPUs per node, NVLink3 inside, HDR InfiniBand across."""
    if num_gpus % 8 and num_gpus > 8:
        raise ValueError("num_gpus must be a multiple of 8 beyond one node")
    if num_gpus <= 8:
        return ClusterSpec(num_nodes=1, gpus_per_node=num_gpus, **overrides)
    return ClusterSpec(num_nodes=num_gpus // 8, **overrides)


def h100_cluster(num_gpus: int, **overrides) -> ClusterSpec:
    overrides.setdefault("peak_matmul_flops_per_gpu", HARDWARE_PEAK_FLOPS["h100"])
    overrides.setdefault("intra_node_bandwidth", 450e9)
    overrides.setdefault("inter_node_bandwidth", 50e9)
    overrides.setdefault("hbm_bandwidth", 3.35e12)
    return a100_cluster(num_gpus, **overrides)


def table1_sweep(model: str, seq_len: int, num_gpus: int | None = None) -> SweepSpec:
    """Sweep spaces of the main efficiency sweep (RMSNorm kernel and checkpointing swept)."""
    key = (model, seq_len)
    table = {
        ("llama-13b", 2048): (64, (1, 2), (1, 2), (1, 2, 4, 8)),
        ("llama-13b", 8192): (128, (1, 2, 4), (1, 2, 4), (1, 2, 4)),
        ("llama-30b", 2048): (256, (1, 2, 4), (1, 2, 4), (1, 2, 4)),
        ("llama-30b", 8192): (128, (2, 4), (2, 4, 8, 16), (1, 2, 4)),
        ("llama-65b", 2048): (128, (2, 4, 8), (2, 4, 8), (1, 2, 4)),
    }
    if key not in table:
        raise KeyError(f"no main-sweep definition for {model} at seq_len={seq_len}")
    gpus, tps, pps, mbs = table[key]
    return SweepSpec(
        arch=model_preset(model, seq_len),
        cluster=a100_cluster(num_gpus or gpus),
        global_batch=default_global_batch(seq_len),
        tp_options=tps, pp_options=pps, mb_options=mbs,
        checkpointing_options=(False, True), kernel_options=(False, True),
    )


def sequence_parallel_sweep(model: str, seq_len: int) -> SweepSpec:
    """Sweep spaces of the sequence-parallel sweep (RMSNorm kernel on, no checkpointing)."""
    key = (model, seq_len)
    table = {
        ("llama-13b", 2048): (32, (1, 2), (1, 2), (1, 2, 4, 8)),
        ("llama-13b", 8192): (64, (1, 2, 4), (1, 2, 4), (1, 2, 4)),
        ("llama-30b", 2048): (64, (1, 2, 4), (1, 2, 4), (1, 2, 4)),
        ("llama-30b", 8192): (64, (2, 4), (2, 4, 8, 16), (1, 2, 4)),
        ("llama-65b", 2048): (64, (2, 4, 8), (2, 4, 8), (1, 2, 4)),
    }
    if key not in table:
        raise KeyError(f"no sequence-parallel sweep definition for {model} at seq_len={seq_len}")
    gpus, tps, pps, mbs = table[key]
    return SweepSpec(
        arch=model_preset(model, seq_len),
        cluster=a100_cluster(gpus),
        global_batch=default_global_batch(seq_len),
        tp_options=tps, pp_options=pps, mb_options=mbs,
        seq_parallel_options=(False, True), kernel_options=(True,),
    )
