"""Latency, parameter, and operation-count measurements.

Times the single-clip forward pass only (no preprocessing, no I/O) with a
monotonic nanosecond clock, reporting nearest-rank percentiles over many
repetitions. Structural op counts come from the instrumented counters, so
the harness can assert exact per-step costs rather than trusting wall time.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import cell
from .cell import GruWeights, MaskConfig, OpCounters, RestWeights, UpdateSchedule
from .errors import ValidationError
from .graph import DistanceGraph

MIN_REPS = 100
MIN_WARMUP = 10


@dataclass
class LatencyReport:
    """One benchmark row; CSV columns match these fields in order."""

    model_id: str
    clip_seconds: int
    reps: int
    warmup: int
    median_ns: int
    p90_ns: int
    p99_ns: int
    dense_multiplies: int
    graph_convs: int
    gate_evaluations: int
    param_count: int
    footprint_bytes: int


CSV_COLUMNS = tuple(f.name for f in fields(LatencyReport))


def footprint(weights) -> int:
    """Serialized weight bytes: 4 per parameter (float32 storage)."""
    return footprint_from_count(cell.count_parameters(weights))


def footprint_from_count(param_count: int) -> int:
    if param_count < 0:
        raise ValidationError("parameter count cannot be negative")
    return 4 * param_count


def _nearest_rank(sorted_ns: np.ndarray, q: float) -> int:
    idx = max(0, int(np.ceil(q * sorted_ns.size)) - 1)
    return int(sorted_ns[idx])


def measure_latency_ns(
    run_once: Callable[[], object], reps: int, warmup: int
) -> tuple[int, int, int]:
    """(median, p90, p99) nanoseconds of ``run_once`` after warmup."""
    if reps < MIN_REPS:
        raise ValidationError(f"reps must be >= {MIN_REPS}, got {reps}")
    if warmup < MIN_WARMUP:
        raise ValidationError(f"warmup must be >= {MIN_WARMUP}, got {warmup}")
    for _ in range(warmup):
        run_once()
    samples = np.empty(reps, dtype=np.int64)
    for i in range(reps):
        start = time.perf_counter_ns()
        run_once()
        samples[i] = time.perf_counter_ns() - start
    samples.sort()
    return (
        _nearest_rank(samples, 0.50),
        _nearest_rank(samples, 0.90),
        _nearest_rank(samples, 0.99),
    )


def load_warning() -> str | None:
    """Non-fatal notice when the host looks busy during a benchmark."""
    try:
        load = os.getloadavg()[0]
    except OSError:
        return None
    cpus = os.cpu_count() or 1
    if load > 1.5 * cpus:
        return (
            f"warning: load average {load:.2f} exceeds 1.5x the {cpus} "
            "available cpus; latency numbers may be noisy"
        )
    return None


def _random_clip(
    rng: np.random.Generator, clip_seconds: int, m: int, n: int
) -> np.ndarray:
    return rng.standard_normal((clip_seconds, m, n))


def bench_rest(
    weights: RestWeights,
    graph: DistanceGraph,
    mask_cfg: MaskConfig,
    updates: int,
    clip_seconds_list: Sequence[int],
    reps: int = 1000,
    warmup: int = 100,
    seed: int = 0,
    model_id: str | None = None,
    rule: str = "reinject",
) -> list[LatencyReport]:
    """Latency rows for the main cell across clip lengths."""
    schedule = UpdateSchedule.fixed(updates)
    params = cell.count_parameters(weights)
    if model_id is None:
        model_id = f"rest_q{weights.q}_i{updates}_{mask_cfg.mode}"
    reports = []
    for clip_seconds in clip_seconds_list:
        rng = np.random.default_rng([seed, clip_seconds])
        clip = _random_clip(rng, clip_seconds, weights.m, graph.n_nodes)
        mask_rng = np.random.default_rng([seed, clip_seconds, 1])

        def run_once():
            cell.rest_forward(
                clip, weights, graph, schedule, mask_cfg,
                rng=mask_rng, rule=rule,
            )

        median, p90, p99 = measure_latency_ns(run_once, reps, warmup)
        counters = OpCounters()
        cell.rest_forward(
            clip, weights, graph, schedule, mask_cfg,
            rng=np.random.default_rng([seed, clip_seconds, 2]),
            counters=counters, rule=rule,
        )
        reports.append(
            LatencyReport(
                model_id, clip_seconds, reps, warmup, median, p90, p99,
                counters.dense_multiplies, counters.graph_convs,
                counters.gate_evaluations, params, footprint_from_count(params),
            )
        )
    return reports


def bench_gru(
    weights: GruWeights,
    n_nodes: int,
    clip_seconds_list: Sequence[int],
    reps: int = 1000,
    warmup: int = 100,
    seed: int = 0,
    model_id: str | None = None,
) -> list[LatencyReport]:
    """Latency rows for the gated baseline under the same harness."""
    params = cell.count_parameters(weights)
    if model_id is None:
        model_id = f"gru_q{weights.q}"
    reports = []
    for clip_seconds in clip_seconds_list:
        rng = np.random.default_rng([seed, clip_seconds])
        clip = _random_clip(rng, clip_seconds, weights.m, n_nodes)

        def run_once():
            cell.gru_forward(clip, weights)

        median, p90, p99 = measure_latency_ns(run_once, reps, warmup)
        counters = OpCounters()
        cell.gru_forward(clip, weights, counters=counters)
        reports.append(
            LatencyReport(
                model_id, clip_seconds, reps, warmup, median, p90, p99,
                counters.dense_multiplies, counters.graph_convs,
                counters.gate_evaluations, params, footprint_from_count(params),
            )
        )
    return reports


def write_report_csv(path: str | Path, reports: Sequence[LatencyReport]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in reports:
            writer.writerow([getattr(r, col) for col in CSV_COLUMNS])


def read_report_csv(path: str | Path) -> list[LatencyReport]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        kwargs = {}
        for f in fields(LatencyReport):
            raw = row[f.name]
            kwargs[f.name] = raw if f.type == "str" else int(raw)
        out.append(LatencyReport(**kwargs))
    return out
