"""Command-line entry point: ``layoutlab <command> ...``.

Exit codes: 0 success, 2 invalid spec or arguments, 3 validation below threshold.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

from .calibration import calibrate, reference_setup
from .core import (HARDWARE_PEAK_FLOPS, PRESET_NAMES, GiB, LayoutInvalid, ParallelLayout,
                   a100_cluster, count_parameters, default_global_batch, model_preset,
                   sequence_parallel_sweep, validate_layout)
from .flops import MfuInputs, mfu_from_step_time, mfu_from_tokens_per_gpu, step_time_from_mfu
from .memory import memory_by_stage
from .pipeline import StageTiming, simulate_1f1b
from .reference import BUNDLED_TABLES, ReferenceParseError, load_bundled, load_reference, validate
from .sweep import (SpecError, format_csv, format_table, load_predictions, load_spec,
                    run_sweep, sweep_rows)
from .throughput import CostKnobs, estimate

EXIT_OK, EXIT_INVALID, EXIT_THRESHOLD = 0, 2, 3

BUILTIN_SWEEPS = {
    "c2": ("llama-13b", 2048),
    "c3": ("llama-13b", 8192),
    "c4": ("llama-30b", 2048),
    "c5": ("llama-30b", 8192),
    "c6": ("llama-65b", 2048),
}


def _write(text: str, path=None) -> None:
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _load_records(name_or_path: str):
    if name_or_path in BUNDLED_TABLES:
        return load_bundled(name_or_path)
    return load_reference(name_or_path)


def _parse_override(text: str) -> tuple[str, float]:
    name, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected NAME=VALUE, got {text!r}")
    try:
        return name.strip(), float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{value!r} is not a number") from None


def _knobs(args) -> CostKnobs:
    knobs = CostKnobs.load(args.knobs) if getattr(args, "knobs", None) else CostKnobs()
    overrides = dict(getattr(args, "set", None) or [])
    if overrides:
        knobs = CostKnobs.from_dict({**json.loads(knobs.to_json()), **overrides})
    return knobs


def _add_layout_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, choices=PRESET_NAMES)
    p.add_argument("--seq-len", type=int, default=2048)
    p.add_argument("--gpus", type=int, required=True)
    p.add_argument("--tp", type=int, default=1)
    p.add_argument("--pp", type=int, default=1)
    p.add_argument("--mb", type=int, default=1)
    p.add_argument("--global-batch", type=int, help="sequences per step (default: 2048 at 2k, else 512)")
    p.add_argument("--sp", action="store_true", help="sequence parallelism")
    p.add_argument("--ckpt", action="store_true", help="full activation checkpointing")
    p.add_argument("--rmsnorm", action="store_true", help="fused RMSNorm kernel")
    p.add_argument("--attention", default="flash2",
                   choices=("naive", "megatron_fused", "flash1", "flash2"))


def _add_knob_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--knobs", help="JSON knob file written by 'calibrate'")
    p.add_argument("--set", action="append", type=_parse_override, metavar="KNOB=VALUE",
                   help="override one numeric knob (repeatable)")


def _layout_from(args):
    arch = model_preset(args.model, args.seq_len)
    cluster = a100_cluster(args.gpus)
    gbs = args.global_batch or default_global_batch(args.seq_len)
    layout = ParallelLayout.derive(
        cluster.world_size, args.tp, args.pp, args.mb, gbs,
        activation_checkpointing=args.ckpt, sequence_parallel=args.sp,
        rmsnorm_kernel=args.rmsnorm, attention_kernel=args.attention,
    )
    problems = validate_layout(arch, cluster, layout)
    if problems:
        raise LayoutInvalid("; ".join(problems))
    return arch, cluster, layout


# -- commands -----------------------------------------------------------------

def cmd_sweep(args) -> int:
    if bool(args.spec) == bool(args.builtin):
        raise SpecError("give exactly one of --spec or --builtin")
    if args.spec:
        spec = load_spec(args.spec)
    else:
        spec = sequence_parallel_sweep(*BUILTIN_SWEEPS[args.builtin])
    result = run_sweep(spec, _knobs(args), workers=args.workers)
    if result.notice:
        print(f"notice: {result.notice}", file=sys.stderr)
    rows = sweep_rows(result)
    _write(format_table(rows) if args.format == "table" else format_csv(rows), args.output)
    return EXIT_OK


def cmd_validate(args) -> int:
    predictions = load_predictions(args.predictions)
    report = validate(predictions, _load_records(args.reference))
    if args.rows:
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(["mb", "tp", "pp", "sequence_parallel", "activation_checkpointing",
                         "rmsnorm_kernel", "attention_kernel", "measured_oom",
                         "predicted_feasible", "measured_step_time", "predicted_step_time"])
        for r in report.rows:
            writer.writerow([*r.key, r.measured_oom, r.predicted_feasible,
                             r.measured_step_time or "", r.predicted_step_time or ""])
    print(report.summary())
    failed = []
    tau = report.rank_correlation
    if args.min_tau is not None and (math.isnan(tau) or tau < args.min_tau):
        failed.append(f"tau below {args.min_tau}")
    if args.min_oom_accuracy is not None and report.oom_accuracy < args.min_oom_accuracy:
        failed.append(f"OOM accuracy below {args.min_oom_accuracy:.0%}")
    if args.require_top3 and not report.top3_hit:
        failed.append("predicted best is outside the measured top 3")
    if failed:
        print("FAIL: " + "; ".join(failed), file=sys.stderr)
        return EXIT_THRESHOLD
    return EXIT_OK


def cmd_calibrate(args) -> int:
    records = _load_records(args.reference)
    result = calibrate(records, global_batch=args.global_batch)
    setup = reference_setup(records, args.global_batch)
    for record, reason in setup.skipped:
        print(f"skipped mb={record.mb} tp={record.tp} pp={record.pp}: {reason}", file=sys.stderr)
    print(f"memory rows: {', '.join(str(k[:4]) for k in result.memory_rows)}", file=sys.stderr)
    print(f"fitted {result.fitted_rows} rows, rms log error {result.rms_log_error:.4f}",
          file=sys.stderr)
    _write(result.knobs.to_json() + "\n", args.out)
    return EXIT_OK


def cmd_mfu(args) -> int:
    if args.model:
        arch = model_preset(args.model, args.seq_len)
        params = args.params or count_parameters(arch)
        layers, hidden = arch.num_layers, arch.hidden_size
    else:
        if args.params is None or args.layers is None or args.hidden is None:
            raise SpecError("give --model or all of --params, --layers and --hidden")
        params, layers, hidden = args.params, args.layers, args.hidden
    peak = args.peak_flops or HARDWARE_PEAK_FLOPS[args.hardware]
    inputs = MfuInputs(
        step_time=args.step_time or 1.0, global_batch=args.global_batch, seq_len=args.seq_len,
        world_size=args.gpus, peak_flops=peak, param_count=params, num_layers=layers,
        hidden_size=hidden,
    )
    if args.step_time:
        mfu = mfu_from_step_time(inputs)
    elif args.tokens_per_gpu:
        mfu = mfu_from_tokens_per_gpu(args.tokens_per_gpu, inputs)
    else:
        raise SpecError("give --step-time or --tokens-per-gpu")
    print(f"mfu={mfu:.6f} ({mfu * 100:.2f}%)")
    print(f"step_time_at_this_mfu={step_time_from_mfu(min(mfu, 1.0), inputs):.6g}s")
    return EXIT_OK


def cmd_memory(args) -> int:
    arch, cluster, layout = _layout_from(args)
    knobs = _knobs(args)
    cluster = knobs.effective_cluster(cluster)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["stage", "weights_gib", "gradients_gib", "optimizer_gib",
                     "activations_gib", "overhead_gib", "total_gib", "fits"])
    for m in memory_by_stage(arch, layout, knobs.activation_coefficient):
        writer.writerow([m.stage] + [f"{v / GiB:.3f}" for v in (
            m.weight_bytes, m.gradient_bytes, m.optimizer_bytes, m.activation_bytes,
            m.overhead_bytes, m.total_bytes)] + [str(m.total_bytes <= cluster.usable_vram_bytes).lower()])
    print(f"budget_gib={cluster.usable_vram_bytes / GiB:.3f}", file=sys.stderr)
    return EXIT_OK


def _floats(text: str):
    values = [float(v) for v in text.split(",")]
    return values[0] if len(values) == 1 else values


def cmd_pipesim(args) -> int:
    timing = StageTiming(_floats(args.forward), _floats(args.backward), args.p2p)
    trace = simulate_1f1b(args.pp, args.microbatches, timing)
    out = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["stage", "mb", "kind", "start", "end"])
        writer.writerows(trace.to_csv_rows())
    finally:
        if args.output:
            out.close()
    print(f"step_time={trace.step_time:.6g} bubble_fraction={trace.bubble_fraction:.6f}",
          file=sys.stderr)
    return EXIT_OK


def cmd_estimate(args) -> int:
    arch, cluster, layout = _layout_from(args)
    est = estimate(arch, cluster, layout, _knobs(args))
    print(layout.describe())
    print(f"peak_mem_gib={est.peak_mem_bytes / GiB:.2f} feasible={str(est.feasible).lower()}")
    if est.feasible:
        print(f"step_time={est.step_time:.4f}s mfu={est.mfu * 100:.2f}% "
              f"tokens_per_second={est.tokens_per_second:.0f} bubble={est.bubble_fraction:.4f}")
        for name, seconds in est.breakdown.items():
            print(f"  {name:<10} {seconds:10.3f}s")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="layoutlab",
                                     description="3D-parallel layout cost model and sweep tools")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sweep", help="estimate and rank every layout of a sweep spec")
    p.add_argument("--spec", help="JSON sweep spec")
    p.add_argument("--builtin", choices=sorted(BUILTIN_SWEEPS),
                   help="sequence-parallel sweep matching a bundled reference table")
    p.add_argument("--format", choices=("csv", "table"), default="csv")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--output", "-o")
    _add_knob_args(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("validate", help="compare a sweep CSV against a reference table")
    p.add_argument("--predictions", required=True)
    p.add_argument("--reference", required=True, help="CSV path or bundled name (c2 ... c6)")
    p.add_argument("--min-tau", type=float)
    p.add_argument("--min-oom-accuracy", type=float)
    p.add_argument("--require-top3", action="store_true")
    p.add_argument("--rows", action="store_true", help="print the per-row comparison")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("calibrate", help="fit cost knobs to a reference table")
    p.add_argument("--reference", required=True, help="CSV path or bundled name (c2 ... c6)")
    p.add_argument("--global-batch", type=int)
    p.add_argument("--out", "-o")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("mfu", help="model FLOPs utilization from a step time or token rate")
    p.add_argument("--model", choices=PRESET_NAMES)
    p.add_argument("--params", type=float)
    p.add_argument("--layers", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--seq-len", type=int, default=2048)
    p.add_argument("--global-batch", type=int, default=2048)
    p.add_argument("--gpus", type=int, required=True)
    p.add_argument("--step-time", type=float)
    p.add_argument("--tokens-per-gpu", type=float)
    p.add_argument("--hardware", choices=sorted(HARDWARE_PEAK_FLOPS), default="a100")
    p.add_argument("--peak-flops", type=float)
    p.set_defaults(func=cmd_mfu)

    p = sub.add_parser("memory", help="per-stage memory breakdown of one layout")
    _add_layout_args(p)
    _add_knob_args(p)
    p.set_defaults(func=cmd_memory)

    p = sub.add_parser("pipesim", help="simulate a 1F1B schedule and print its trace as CSV")
    p.add_argument("--pp", type=int, required=True)
    p.add_argument("--microbatches", "-m", type=int, required=True)
    p.add_argument("--forward", default="1.0", help="seconds, or one comma-separated value per stage")
    p.add_argument("--backward", default="2.0", help="seconds, or one comma-separated value per stage")
    p.add_argument("--p2p", type=float, default=0.0)
    p.add_argument("--output", "-o")
    p.set_defaults(func=cmd_pipesim)

    p = sub.add_parser("estimate", help="step time, MFU and breakdown for one layout")
    _add_layout_args(p)
    _add_knob_args(p)
    p.set_defaults(func=cmd_estimate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SpecError, LayoutInvalid, ReferenceParseError, KeyError, ValueError) as exc:
        message = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {message}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
