"""Cost model and sweep tooling for 3D-parallel LLM training layouts."""

from .core import (ClusterSpec, LayoutInvalid, ModelArch, ParallelLayout, SweepSpec,
                   a100_cluster, count_parameters, enumerate_layouts, model_preset)
from .flops import MfuInputs, mfu_from_step_time, step_time_from_mfu
from .memory import MemoryEstimate, peak_memory, predict_feasible
from .pipeline import ScheduleTrace, StageTiming, simulate_1f1b
from .reference import ReferenceRecord, ValidationReport, load_reference, validate
from .sweep import run_sweep
from .throughput import CostKnobs, PerfEstimate, estimate, rank_layouts

__version__ = "0.1.0"

__all__ = [
    "ClusterSpec", "LayoutInvalid", "ModelArch", "ParallelLayout", "SweepSpec",
    "a100_cluster", "count_parameters", "enumerate_layouts", "model_preset",
    "MfuInputs", "mfu_from_step_time", "step_time_from_mfu",
    "MemoryEstimate", "peak_memory", "predict_feasible",
    "ScheduleTrace", "StageTiming", "simulate_1f1b",
    "ReferenceRecord", "ValidationReport", "load_reference", "validate",
    "run_sweep", "CostKnobs", "PerfEstimate", "estimate", "rank_layouts",
]
