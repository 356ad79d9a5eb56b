import json

import pytest

from layoutlab.core import enumerate_layouts, table1_sweep
from layoutlab.reference import PredictionRow, load_bundled, validate
from layoutlab.sweep import (
    SWEEP_COLUMNS, SpecError, format_csv, format_table, load_predictions, load_spec, run_sweep,
    spec_from_dict, sweep_rows,
)
from layoutlab.throughput import estimate


def test_table1_13b_sweep_size():
    result = run_sweep(table1_sweep("llama-13b", 2048))
    assert 0 < len(result.estimates) <= 48
    assert result.notice is None
    feasible = [e for e in result.estimates if e.feasible]
    assert [e.mfu for e in feasible] == sorted((e.mfu for e in feasible), reverse=True)
    # infeasible rows follow every feasible one
    flags = [e.feasible for e in result.estimates]
    assert flags == sorted(flags, reverse=True)


def test_singleton_spec_equals_estimate():
    spec = spec_from_dict({"model": "llama-13b", "gpus": 64, "tp": [2], "pp": [2], "mb": [1],
                           "rmsnorm_kernel": [True]})
    result = run_sweep(spec)
    (only,) = result.estimates
    (layout,) = enumerate_layouts(spec)
    assert only == estimate(spec.arch, spec.cluster, layout)


def test_30b_8k_needs_kernel_or_checkpointing():
    base = {"model": "llama-30b", "seq_len": 8192, "gpus": 128, "tp": [2, 4],
            "pp": [2, 4, 8, 16], "mb": [1, 2, 4]}
    bare = run_sweep(spec_from_dict(base))
    assert bare.estimates and not any(e.feasible for e in bare.estimates)
    assert "out of memory" in bare.notice
    ckpt = run_sweep(spec_from_dict({**base, "checkpointing": [True]}))
    kernel = run_sweep(spec_from_dict({**base, "rmsnorm_kernel": [True]}))
    assert any(e.feasible for e in ckpt.estimates)
    assert any(e.feasible for e in kernel.estimates)


def test_empty_admissible_set_has_notice():
    # 52 heads: neither tp option divides them
    result = run_sweep(spec_from_dict({"model": "llama-30b", "gpus": 64, "tp": [8, 16]}))
    assert result.empty
    assert "no admissible layouts" in result.notice
    assert format_csv(sweep_rows(result)).strip() == ",".join(SWEEP_COLUMNS)


@pytest.mark.parametrize("data,match", [
    ({"model": "llama-13b", "gpus": 64, "bogus": 1}, "unknown spec fields"),
    ({"gpus": 64}, "exactly one of 'model'"),
    ({"model": "llama-13b"}, "exactly one of 'gpus'"),
    ({"model": "gpt-9", "gpus": 64}, "gpt-9"),
    ({"model": "llama-13b", "gpus": 64, "tp": []}, "invalid sweep spec"),
    ({"arch": {"name": "x", "num_layers": 2}, "gpus": 8}, "invalid arch"),
    ({"model": "llama-13b", "cluster": {"num_nodes": 1, "nics": 4}}, "unknown cluster fields"),
    ([1, 2], "JSON object"),
])
def test_spec_errors(data, match):
    with pytest.raises(SpecError, match=match):
        spec_from_dict(data)


def test_spec_file_round_trip(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps({"model": "llama-65b", "gpus": 64, "tp": [2, 8], "pp": [2, 8],
                                "rmsnorm_kernel": [True]}))
    spec = load_spec(path)
    assert spec.global_batch == 2048 and spec.cluster.world_size == 64
    path.write_text("{not json")
    with pytest.raises(SpecError, match="not valid JSON"):
        load_spec(path)


def test_custom_arch_and_cluster():
    spec = spec_from_dict({
        "arch": {"name": "small", "num_layers": 4, "hidden_size": 512, "num_heads": 8,
                 "vocab_size": 1000, "mlp_expansion": 2.0},
        "seq_len": 512,
        "cluster": {"num_nodes": 1, "gpus_per_node": 4},
        "global_batch": 16, "tp": [1, 2], "pp": [1, 2],
    })
    result = run_sweep(spec)
    assert len(result.estimates) == 4 and all(e.feasible for e in result.estimates)


def test_csv_round_trip_through_validation(tmp_path):
    spec = table1_sweep("llama-13b", 2048)
    result = run_sweep(spec)
    path = tmp_path / "out.csv"
    path.write_text(format_csv(sweep_rows(result)))
    rows = load_predictions(path)
    assert rows == [PredictionRow.from_estimate(e) for e in result.estimates]
    # the reloaded table validates exactly like the in-memory estimates
    ref = load_bundled("c2")
    extra = run_sweep(spec_from_dict({"model": "llama-13b", "gpus": 32, "tp": [1, 2], "pp": [1, 2],
                                      "mb": [1, 2, 4], "rmsnorm_kernel": [True]}))
    path.write_text(format_csv(sweep_rows(extra)))
    assert validate(load_predictions(path), ref) == validate(list(extra.estimates), ref)


def test_load_predictions_rejects_bad_files(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("mb,tp\n1,1\n")
    with pytest.raises(SpecError, match="missing columns"):
        load_predictions(path)
    row = dict(sweep_rows(run_sweep(table1_sweep("llama-13b", 2048)))[0], mb="one")
    path.write_text(format_csv([row]))
    with pytest.raises(SpecError, match=r"bad\.csv:2"):
        load_predictions(path)


def test_table_rendering_lines_up():
    result = run_sweep(table1_sweep("llama-13b", 2048))
    text = format_table(sweep_rows(result))
    lines = text.splitlines()
    assert len(lines) == len(result.estimates) + 2
    assert len({len(line) for line in lines}) == 1


def test_workers_do_not_change_output():
    spec = table1_sweep("llama-65b", 2048)
    assert run_sweep(spec, workers=4) == run_sweep(spec)
