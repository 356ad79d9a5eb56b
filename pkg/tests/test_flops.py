import csv
from importlib import resources

import pytest
from hypothesis import given, strategies as st

from layoutlab.core import HARDWARE_PEAK_FLOPS
from layoutlab.flops import (
    MfuInputs, end_to_end_time, mfu_from_step_time, mfu_from_tokens_per_gpu,
    model_flops_per_token, peak_tokens_per_second, step_time_from_mfu, with_step_time,
)

A100 = HARDWARE_PEAK_FLOPS["a100"]


def megatron_inputs(step, gbs, gpus, n, layers, hidden):
    return MfuInputs(step, gbs, 2048, gpus, A100, n, layers, hidden)


def test_flops_per_token():
    expected = 6 * 65e9 + 12 * 80 * 8192 * 2048
    assert model_flops_per_token(65e9, 80, 8192, 2048) == expected
    assert expected == pytest.approx(4.061e11, rel=1e-3)
    assert model_flops_per_token(1e9, 0, 8192, 2048) == 6e9


def test_hardware_presets():
    assert HARDWARE_PEAK_FLOPS == {"a100": 312e12, "h100": 989.4e12, "rtx3090": 35.58e12}


def test_llama65b_from_tokens_per_gpu():
    inputs = MfuInputs(1.0, 2048, 2048, 2048, A100, 65e9, 80, 8192)
    assert mfu_from_tokens_per_gpu(380, inputs) == pytest.approx(0.4946, abs=5e-5)


@pytest.mark.parametrize("step,gbs,gpus,n,layers,hidden,expected", [
    (8.93, 1024, 256, 18.4e9, 40, 6144, 0.3424),
    (13.92, 1536, 512, 39.1e9, 48, 8192, 0.3456),
    (15.59, 1792, 1024, 76.1e9, 60, 10240, 0.3476),
])
def test_megatron_recomputation(step, gbs, gpus, n, layers, hidden, expected):
    mfu = mfu_from_step_time(megatron_inputs(step, gbs, gpus, n, layers, hidden))
    assert mfu == pytest.approx(expected, abs=5e-5)


def test_mfu_by_hand():
    # 4 sequences of 10 tokens in 2 s on 2 GPUs of 1e4 flop/s; 6N + 12LhT = 60 + 240
    inputs = MfuInputs(2.0, 4, 10, 2, 1e4, 10, 1, 2)
    assert peak_tokens_per_second(inputs) == pytest.approx(2e4 / 300)
    assert mfu_from_step_time(inputs) == pytest.approx(0.3)


def test_doubling_step_time_halves_mfu():
    inputs = megatron_inputs(8.93, 1024, 256, 18.4e9, 40, 6144)
    assert mfu_from_step_time(with_step_time(inputs, 17.86)) == pytest.approx(
        mfu_from_step_time(inputs) / 2)


def test_step_time_from_mfu_examples():
    inputs = megatron_inputs(1.0, 1792, 1024, 76.1e9, 60, 10240)
    assert step_time_from_mfu(0.3476, inputs) == pytest.approx(15.59, abs=0.05)
    peak = step_time_from_mfu(1.0, inputs)
    assert mfu_from_step_time(with_step_time(inputs, peak)) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        step_time_from_mfu(0.0, inputs)
    with pytest.raises(ValueError):
        step_time_from_mfu(1.2, inputs)


def test_inputs_must_be_positive():
    with pytest.raises(ValueError):
        MfuInputs(0.0, 1, 1, 1, 1.0, 1.0, 1, 1)
    with pytest.raises(ValueError):
        MfuInputs(1.0, 1, 1, 1, 1.0, -1.0, 1, 1)
    MfuInputs(1.0, 1, 1, 1, 1.0, 1.0, 0, 1)  # zero layers is allowed


def test_end_to_end_step_times():
    assert end_to_end_time(1024 * 2048, 18.4e9, 256, 135e12) == pytest.approx(8.93, abs=0.005)
    # 13.926 s, printed truncated as 13.92
    assert end_to_end_time(1536 * 2048, 39.1e9, 512, 138e12) == pytest.approx(13.92, abs=0.01)
    assert end_to_end_time(1792 * 2048, 76.1e9, 1024, 140e12) == pytest.approx(15.59, abs=0.005)
    assert end_to_end_time(100, 1e9, 8, 2e12) == pytest.approx(end_to_end_time(100, 1e9, 8, 1e12) / 2)
    with pytest.raises(ValueError):
        end_to_end_time(0, 1e9, 8, 1e12)


def _end_to_end_rows():
    text = (resources.files("layoutlab") / "data" / "end_to_end.csv").read_text()
    return list(csv.DictReader(text.splitlines()))


def test_end_to_end_table_rows_with_full_data():
    # rows that print step time (or token rate) together with the architecture
    checked = 0
    for row in _end_to_end_rows():
        if not row["param_count"]:
            continue
        inputs = MfuInputs(float(row["step_time"] or 1.0), int(row["global_batch"]),
                           int(row["seq_len"]), int(row["gpus"]), A100,
                           float(row["param_count"]), int(row["num_layers"]),
                           int(row["hidden_size"]))
        if row["step_time"]:
            mfu = mfu_from_step_time(inputs)
        else:
            mfu = mfu_from_tokens_per_gpu(float(row["tokens_per_second_per_gpu"]), inputs)
        assert mfu * 100 == pytest.approx(float(row["mfu"]), abs=0.2), row["model"]
        checked += 1
    assert checked == 4


@given(mfu=st.floats(min_value=1e-4, max_value=1.0), gbs=st.integers(1, 4096),
       seq=st.integers(1, 32768), world=st.integers(1, 4096), n=st.floats(1e6, 1e12),
       layers=st.integers(0, 200), hidden=st.integers(1, 32768))
def test_round_trip(mfu, gbs, seq, world, n, layers, hidden):
    inputs = MfuInputs(1.0, gbs, seq, world, A100, n, layers, hidden)
    step = step_time_from_mfu(mfu, inputs)
    assert mfu_from_step_time(with_step_time(inputs, step)) == pytest.approx(mfu, rel=1e-9)


@given(scale=st.floats(min_value=0.01, max_value=100.0))
def test_scaling_batch_and_time_preserves_mfu(scale):
    base = MfuInputs(10.0, 1000, 2048, 64, A100, 13e9, 40, 5120)
    scaled = MfuInputs(10.0 * scale, 1000, 2048, 64, A100, 13e9, 40, 5120)
    # global batch must stay integral, so scale the time and compare tokens/second instead
    assert mfu_from_step_time(scaled) * scale == pytest.approx(mfu_from_step_time(base))
    doubled = MfuInputs(20.0, 2000, 2048, 64, A100, 13e9, 40, 5120)
    assert mfu_from_step_time(doubled) == pytest.approx(mfu_from_step_time(base))
