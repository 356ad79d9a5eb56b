from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from layoutlab.core import GiB, ModelArch, ParallelLayout, a100_cluster, count_parameters, model_preset
from layoutlab.memory import (
    DEFAULT_OVERHEAD_BYTES, MemoryEstimate, activation_memory, calibrate_memory,
    in_flight_micro_batches, layer_activation_bytes, logit_bytes, memory_by_stage,
    peak_memory, predict_feasible, stage_parameters, static_memory,
)
from layoutlab.throughput import CostKnobs

KNOBS = CostKnobs()
COEF = KNOBS.activation_coefficient


def cluster(gpus):
    return KNOBS.effective_cluster(a100_cluster(gpus))


def layout(gpus, tp=1, pp=1, mb=1, gbs=2048, **flags):
    return ParallelLayout.derive(gpus, tp, pp, mb, gbs, **flags)


def test_estimate_total_is_sum():
    m = MemoryEstimate(1, 2, 3, 4, 5)
    assert m.total_bytes == 15


def test_static_memory_13b_single_rank():
    arch = model_preset("llama-13b")
    n = count_parameters(arch)
    m = static_memory(arch, layout(64))
    assert m.weight_bytes + m.gradient_bytes == pytest.approx(4 * n)
    assert m.optimizer_bytes == pytest.approx(12 * n / 64)
    assert m.activation_bytes == 0
    assert (m.weight_bytes + m.gradient_bytes + m.optimizer_bytes) < 80 * 1e9


def test_unsharded_optimizer_at_dp1():
    arch = model_preset("llama-13b")
    m = static_memory(arch, layout(8, tp=8, gbs=8))
    assert m.optimizer_bytes == pytest.approx(12 * stage_parameters(arch, layout(8, tp=8, gbs=8)))


def test_tp2_halves_weights():
    arch = model_preset("llama-65b")
    one = static_memory(arch, layout(64, tp=1))
    two = static_memory(arch, layout(64, tp=2))
    assert two.weight_bytes == pytest.approx(one.weight_bytes / 2)
    assert two.gradient_bytes == pytest.approx(one.gradient_bytes / 2)


def test_stage_parameters_embedding_placement():
    arch = ModelArch("tiny", 4, 8, 2, 10, 4, 2.0)
    lay = layout(2, pp=2, gbs=2)
    per_layer = 4 * 64 + 3 * 8 * 16 + 16
    assert stage_parameters(arch, lay, 0) == 2 * per_layer + 80
    assert stage_parameters(arch, lay, 1) == 2 * per_layer + 80 + 8
    assert sum(stage_parameters(arch, lay, s) for s in range(2)) == count_parameters(arch)


def test_layer_activation_by_hand():
    # s=4, b=1, h=8, f=16, a=2, t=1, no flash: 2*(4sbh + 4sbh + 3sbf + 2as^2b)
    arch = ModelArch("tiny", 1, 8, 2, 10, 4, 2.0)
    lay = layout(1, gbs=1, attention_kernel="naive", rmsnorm_kernel=True)
    assert layer_activation_bytes(arch, lay) == 2 * (128 + 128 + 192 + 64)
    flash = replace(lay, attention_kernel="flash2")
    assert layer_activation_bytes(arch, flash) == 2 * (128 + 128 + 192)


def test_unfused_norm_keeps_extra_copies():
    # two norms per layer, each keeping an fp32 input and a bf16 output: 12 bytes per element
    arch = model_preset("llama-13b")
    fused = layout(64, tp=4, rmsnorm_kernel=True)
    sbh = arch.seq_len * arch.hidden_size
    assert layer_activation_bytes(arch, replace(fused, rmsnorm_kernel=False)) - \
        layer_activation_bytes(arch, fused) == 12 * sbh
    sp = replace(fused, sequence_parallel=True)
    assert layer_activation_bytes(arch, replace(sp, rmsnorm_kernel=False)) - \
        layer_activation_bytes(arch, sp) == pytest.approx(12 * sbh / 4)


def test_sequence_parallel_divides_replicated_part():
    arch = model_preset("llama-13b")
    plain = layer_activation_bytes(arch, layout(64, tp=4, rmsnorm_kernel=True))
    sp = layer_activation_bytes(arch, layout(64, tp=4, sequence_parallel=True, rmsnorm_kernel=True))
    s, h = arch.seq_len, arch.hidden_size
    assert plain - sp == pytest.approx(2 * 4 * s * h * (1 - 1 / 4))


def test_micro_batch_linearity():
    arch = model_preset("llama-13b")
    one = activation_memory(arch, layout(64, mb=1), 0)
    two = activation_memory(arch, layout(64, mb=2), 0)
    assert two == pytest.approx(2 * one)


def test_sequence_length_scaling_of_linear_terms():
    arch = model_preset("llama-13b")
    lay = layout(64)
    assert layer_activation_bytes(arch.with_seq_len(8192), lay) == pytest.approx(
        4 * layer_activation_bytes(arch, lay))


def test_checkpointing_keeps_boundaries_only():
    arch = model_preset("llama-13b")
    full = layout(64, pp=2)
    ckpt = replace(full, activation_checkpointing=True)
    boundary = 2 * arch.seq_len * arch.hidden_size
    layers = arch.num_layers // 2
    expected = 2 * layers * boundary + layer_activation_bytes(arch, ckpt) - boundary
    assert activation_memory(arch, ckpt, 0) == pytest.approx(expected)
    assert activation_memory(arch, ckpt, 0) < activation_memory(arch, full, 0)


def test_in_flight_bound():
    lay = layout(64, pp=4)
    assert [in_flight_micro_batches(lay, s) for s in range(4)] == [4, 3, 2, 1]
    few = ParallelLayout.derive(64, 1, 4, 1, 32)  # two micro-batches per step
    assert in_flight_micro_batches(few, 0) == 2


def test_logits_on_last_stage_only():
    arch = model_preset("llama-13b")
    lay = layout(64, pp=2)
    assert logit_bytes(arch, lay) == 16 * arch.seq_len * arch.vocab_size
    # stage 0 holds two micro-batches, stage 1 one micro-batch plus the logits
    first = activation_memory(arch, lay, 0, COEF)
    last = activation_memory(arch, lay, 1, COEF)
    assert last == pytest.approx(first / 2 + logit_bytes(arch, lay))
    # the coefficient does not scale the logits buffer
    assert activation_memory(arch, lay, 1, 2.0) - activation_memory(arch, lay, 1, 1.0) == pytest.approx(
        activation_memory(arch, lay, 1, 1.0) - logit_bytes(arch, lay))


def test_peak_is_max_stage():
    arch = model_preset("llama-65b")
    lay = layout(64, tp=2, pp=4)
    stages = memory_by_stage(arch, lay, COEF)
    assert peak_memory(arch, lay, COEF).total_bytes == max(m.total_bytes for m in stages)
    assert stages[0].overhead_bytes == DEFAULT_OVERHEAD_BYTES


@pytest.mark.parametrize("model,gpus,mb,tp,pp,fits", [
    ("llama-13b", 32, 1, 1, 1, True),
    ("llama-13b", 32, 2, 1, 1, False),
    ("llama-65b", 64, 1, 2, 2, False),
])
def test_feasibility_examples(model, gpus, mb, tp, pp, fits):
    arch = model_preset(model)
    lay = layout(gpus, tp, pp, mb, rmsnorm_kernel=True)
    _, feasible = predict_feasible(arch, cluster(gpus), lay, COEF)
    assert feasible is fits


def test_calibration_on_c2_boundary_rows():
    arch = model_preset("llama-13b")
    rows = [
        (layout(32, 1, 1, 1, rmsnorm_kernel=True), False),
        (layout(32, 1, 1, 2, rmsnorm_kernel=True), True),
        (layout(32, 2, 1, 2, rmsnorm_kernel=True, sequence_parallel=True), False),
        (layout(32, 2, 1, 4, rmsnorm_kernel=True, sequence_parallel=True), True),
    ]
    cal = calibrate_memory(arch, a100_cluster(32), rows)
    budget = 80 * GiB * cal.usable_vram_fraction
    for lay, oom in rows:
        total = peak_memory(arch, lay, cal.activation_coefficient).total_bytes
        assert (total > budget) is oom
    assert cal.margin > 1


def test_calibration_rejects_contradictory_rows():
    arch = model_preset("llama-13b")
    small, big = layout(32, mb=1), layout(32, mb=2)
    with pytest.raises(ValueError):
        calibrate_memory(arch, a100_cluster(32), [(small, True), (big, False)])


layouts = st.builds(
    lambda tp, pp, mb, sp, ckpt, attn: (tp, pp, mb, sp, ckpt, attn),
    st.sampled_from([1, 2, 4, 8]), st.sampled_from([1, 2, 4, 8]), st.sampled_from([1, 2, 4]),
    st.booleans(), st.booleans(), st.sampled_from(["naive", "flash2"]),
)


@settings(max_examples=150)
@given(cfg=layouts, model=st.sampled_from(["llama-13b", "llama-65b"]),
       seq=st.sampled_from([2048, 8192]))
def test_memory_monotonicity(cfg, model, seq):
    tp, pp, mb, sp, ckpt, attn = cfg
    arch = model_preset(model, seq)
    base = layout(64, tp, pp, mb, gbs=512, sequence_parallel=sp, activation_checkpointing=ckpt,
                  attention_kernel=attn)
    total = peak_memory(arch, base, COEF).total_bytes
    bigger_mb = ParallelLayout.derive(64, tp, pp, 2 * mb, 512, sequence_parallel=sp,
                                      activation_checkpointing=ckpt, attention_kernel=attn)
    assert peak_memory(arch, bigger_mb, COEF).total_bytes >= total
    assert peak_memory(arch.with_seq_len(2 * seq), base, COEF).total_bytes >= total
    if ckpt:
        assert peak_memory(arch, replace(base, activation_checkpointing=False), COEF).total_bytes >= total
    if tp < 8:
        more_tp = ParallelLayout.derive(64, 2 * tp, pp, mb, 512)
        assert static_memory(arch, more_tp).weight_bytes <= static_memory(arch, base).weight_bytes
    if pp < 8:
        more_pp = ParallelLayout.derive(64, tp, 2 * pp, mb, 512)
        assert (max(static_memory(arch, more_pp, s).weight_bytes for s in range(2 * pp))
                <= max(static_memory(arch, base, s).weight_bytes for s in range(pp)))


@given(dp=st.sampled_from([1, 2, 4, 8, 16, 32, 64]))
def test_zero1_identity(dp):
    arch = model_preset("llama-13b")
    lay = ParallelLayout.derive(dp * 2, 2, 1, 1, 2048)
    m = static_memory(arch, lay)
    assert m.optimizer_bytes * dp == pytest.approx(12 * stage_parameters(arch, lay))
