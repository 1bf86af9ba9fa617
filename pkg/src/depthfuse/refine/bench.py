"""Throughput harness for the propagation engine."""

from __future__ import annotations

import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ..autodiff import Tensor, ops
from .affinity import normalize_affinities
from .engine import PropagationEngine
from .propagation import refine
from .structures import RefinementSchedule, SparseDepth


@dataclass
class BenchReport:
    height: int
    width: int
    kernels: tuple
    steps: int
    threads: int
    wall_seconds: float
    pixels_per_second: float
    per_kernel_seconds: dict = field(default_factory=dict)
    output: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("output")
        d["kernels"] = list(self.kernels)
        return d


def random_inputs(height: int, width: int, schedule: RefinementSchedule, seed: int = 0, batch: int = 1):
    """Seeded coarse map, sparse depth, raw affinities, and head outputs."""
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(0.3, 1.5, size=(batch, 1, height, width))
    sensor = rng.uniform(0.3, 1.5, size=(batch, 1, height, width))
    valid = rng.random((batch, 1, height, width)) < 0.7
    sparse = SparseDepth(np.where(valid, sensor, 0.0), valid)
    raw = {k: rng.standard_normal((batch, k * k - 1, height, width)) for k in schedule.kernels}
    K, T = len(schedule.kernels), len(schedule.snapshots)
    confidence = rng.random((batch, K, height, width))
    alpha = ops.softmax_channel(Tensor(rng.standard_normal((batch, T, height, width)), dtype=np.float64)).data
    beta = ops.softmax_channel(Tensor(rng.standard_normal((batch, K, height, width)), dtype=np.float64)).data
    return coarse, sparse, raw, confidence, alpha, beta


def bench_refine(height: int, width: int, schedule: RefinementSchedule | None = None,
                 threads: int = 1, seed: int = 0, repeats: int = 1) -> BenchReport:
    """Time a full refinement pass; reports the best of ``repeats`` runs."""
    schedule = schedule or RefinementSchedule()
    if min(height, width) < max(schedule.kernels):
        raise ValueError(f"image {height}x{width} smaller than kernel {max(schedule.kernels)}")
    coarse, sparse, raw, confidence, alpha, beta = random_inputs(height, width, schedule, seed)
    fields = {k: normalize_affinities(Tensor(raw[k], dtype=np.float64)) for k in schedule.kernels}
    coarse_t = Tensor(coarse, dtype=np.float64)
    conf_t, alpha_t, beta_t = (Tensor(a, dtype=np.float64) for a in (confidence, alpha, beta))

    with PropagationEngine(threads=threads) as engine:
        # warm-up triggers JIT compilation outside the timed region
        engine.run_branch(coarse[:, 0, :8, :8], raw[schedule.kernels[0]][:, :, :8, :8],
                          coarse[:, 0, :8, :8], confidence[:, 0, :8, :8], sparse.depth[:, 0, :8, :8],
                          sparse.mask[:, 0, :8, :8], schedule.kernels[0], 1)
        best, per_kernel, output = None, {}, None
        for _ in range(max(1, repeats)):
            timings = {}
            start = time.perf_counter()
            for i, k in enumerate(schedule.kernels):
                t0 = time.perf_counter()
                f = fields[k]
                engine.run_branch(coarse[:, 0], f.neighbors.data, f.center.data[:, 0], confidence[:, i],
                                  sparse.depth[:, 0], sparse.mask[:, 0], k, schedule.total_steps)
                timings[str(k)] = time.perf_counter() - t0
            elapsed = time.perf_counter() - start
            if best is None or elapsed < best:
                best, per_kernel = elapsed, timings
        output = refine(coarse_t, sparse, fields, conf_t, alpha_t, beta_t, schedule, engine=engine).data
    return BenchReport(height=height, width=width, kernels=schedule.kernels, steps=schedule.total_steps,
                       threads=threads, wall_seconds=best, pixels_per_second=height * width / best,
                       per_kernel_seconds=per_kernel, output=output)


def logical_cores() -> int:
    return os.cpu_count() or 1
