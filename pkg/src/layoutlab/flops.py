"""Model FLOPs Utilization accounting.

MFU is achieved token throughput divided by the peak token throughput
``world_size * P / (6N + 12 * L * hidden * T)``, where ``T`` is the
sequence length.  All functions return ratios; percent formatting is left
to the CLI.
"""

from __future__ import annotations

from dataclasses import dataclass, replace


@dataclass(frozen=True)
class MfuInputs:
    step_time: float
    global_batch: int
    seq_len: int
    world_size: int
    peak_flops: float
    param_count: float
    num_layers: int
    hidden_size: int

    def __post_init__(self) -> None:
        for name in ("step_time", "global_batch", "seq_len", "world_size", "peak_flops",
                     "param_count", "num_layers", "hidden_size"):
            value = getattr(self, name)
            # num_layers may be zero for the degenerate embedding-only case
            if value < 0 or (value == 0 and name != "num_layers"):
                raise ValueError(f"{name} must be positive, got {value!r}")

    @property
    def tokens_per_step(self) -> int:
        return self.global_batch * self.seq_len


def model_flops_per_token(n_params: float, num_layers: int, hidden_size: int, seq_len: int) -> float:
    """Training FLOPs per token: ``6N`` for the dense weights plus ``12*L*hidden*T`` for attention."""
    return 6 * n_params + 12 * num_layers * hidden_size * seq_len


def peak_tokens_per_second(inputs: MfuInputs) -> float:
    flops = model_flops_per_token(inputs.param_count, inputs.num_layers,
                                  inputs.hidden_size, inputs.seq_len)
    return inputs.peak_flops * inputs.world_size / flops


def mfu_from_step_time(inputs: MfuInputs) -> float:
    tokens_per_second = inputs.tokens_per_step / inputs.step_time
    return tokens_per_second / peak_tokens_per_second(inputs)


def mfu_from_tokens_per_gpu(tokens_per_second_per_gpu: float, inputs: MfuInputs) -> float:
    """MFU from a reported per-GPU throughput; ``inputs.step_time`` is ignored."""
    return tokens_per_second_per_gpu * inputs.world_size / peak_tokens_per_second(inputs)


def step_time_from_mfu(mfu: float, inputs: MfuInputs) -> float:
    """Inverse of :func:`mfu_from_step_time`; ``inputs.step_time`` is ignored."""
    if not 0 < mfu <= 1:
        raise ValueError(f"mfu must be in (0, 1], got {mfu!r}")
    return inputs.tokens_per_step / (mfu * peak_tokens_per_second(inputs))


def end_to_end_time(tokens: float, n_params: float, n_gpus: int, achieved_flops_per_gpu: float) -> float:
    """Training time ``8 * tokens * N / (n * X)`` (forward, backward and one recompute forward)."""
    if min(tokens, n_params, n_gpus, achieved_flops_per_gpu) <= 0:
        raise ValueError("end_to_end_time inputs must be positive")
    return 8 * tokens * n_params / (n_gpus * achieved_flops_per_gpu)


def with_step_time(inputs: MfuInputs, step_time: float) -> MfuInputs:
    return replace(inputs, step_time=step_time)
