"""Runtime and buffer-memory comparison of recurrent vs separable kernel evaluation.

Each cell times forward + backward only; inputs are generated before the
clock starts. Memory is the kernels' tracked working buffers, not process RSS.
"""
from __future__ import annotations

import csv
import os
import statistics
import time
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Iterator

import numpy as np

from .errors import ConfigError
from .kernels import (
    AussmParams, S6Params, aussm_recurrent_backward, aussm_recurrent_reference,
    kernel_backward, kernel_forward, rel_err, s6_recurrent_backward, s6_recurrent_reference,
)
from .scan import ChunkPlan, track_buffers

DEFAULT_LENGTHS = (128, 256, 512, 1024, 2048, 4096, 8192, 16384)
IMPLS = ("recurrent", "separable")
KERNELS = ("aussm", "s6")


@dataclass
class BenchRow:
    impl: str
    kernel: str
    L: int
    batch: int
    d: int
    n: int
    median_wall_ns: int
    mean_wall_ns: float
    peak_tracked_bytes: int  # max live tracked buffers during one forward + backward
    fg_bytes: int  # f/g bytes allocated over one forward + backward
    fg_bytes_per_lane: float  # fg_bytes / (batch * d * n)
    repeats: int
    workers: int
    max_rel_err: float
    status: str = "ok"


def _params(kernel: str, d: int, n: int, rng):
    return (AussmParams if kernel == "aussm" else S6Params).init(d, n, rng)


def _runner(impl: str, kernel: str, p, plan: ChunkPlan):
    if impl == "separable":
        def run(u, dy):
            y, cache = kernel_forward(p, u, plan)
            kernel_backward(cache, dy)
            return y
    elif kernel == "aussm":
        def run(u, dy):
            y = aussm_recurrent_reference(p, u)
            aussm_recurrent_backward(p, u, dy)
            return y
    else:
        def run(u, dy):
            y = s6_recurrent_reference(p, u)
            s6_recurrent_backward(p, u, dy)
            return y
    return run


def time_cell(impl: str, kernel: str, L: int, batch: int = 1, d: int = 4, n: int = 8,
              repeats: int = 50, warmup: int = 5, seed: int = 0,
              plan: ChunkPlan | None = None, reference=None) -> tuple[BenchRow, np.ndarray]:
    """Benchmark one (impl, kernel, L) cell; returns the row and the forward output."""
    if impl not in IMPLS or kernel not in KERNELS:
        raise ConfigError(f"unknown impl/kernel {impl!r}/{kernel!r}")
    if repeats < 1 or warmup < 0:
        raise ConfigError("repeats must be >= 1 and warmup >= 0")
    rng = np.random.default_rng(seed)
    p = _params(kernel, d, n, rng)
    u = rng.normal(size=(batch, d, L))
    dy = rng.normal(size=(batch, d, L))
    run = _runner(impl, kernel, p, plan or ChunkPlan())
    for _ in range(warmup):
        run(u, dy)
    times = []
    peak = fg = 0
    y = None
    for _ in range(repeats):
        with track_buffers() as tracker:
            t0 = time.perf_counter_ns()
            y = run(u, dy)
            times.append(time.perf_counter_ns() - t0)
        peak = max(peak, tracker.peak)
        fg = tracker.totals.get("fg", 0)
    err = rel_err(y, reference) if reference is not None else 0.0
    row = BenchRow(impl, kernel, L, batch, d, n, int(statistics.median(times)), float(statistics.fmean(times)),
                   peak, fg, fg / (batch * d * n), repeats, 1, err)
    return row, y


def run_bench(lengths: Iterable[int] = DEFAULT_LENGTHS, impls: Iterable[str] = IMPLS,
              kernels: Iterable[str] = KERNELS, batch: int = 1, d: int = 4, n: int = 8,
              repeats: int = 50, warmup: int = 5, seed: int = 0,
              plan: ChunkPlan | None = None) -> Iterator[BenchRow]:
    """Yield one row per (kernel, L, impl). A cell that runs out of memory is marked skipped.

    When both impls run, the separable output is compared with the recurrent
    one and the relative error is stored in ``max_rel_err``.
    """
    impls = list(impls)
    for kernel in kernels:
        for L in lengths:
            reference = None
            for impl in sorted(impls, key=IMPLS.index):  # recurrent first, so it is the reference
                try:
                    row, y = time_cell(impl, kernel, L, batch, d, n, repeats, warmup, seed, plan,
                                       reference if impl == "separable" else None)
                except MemoryError:
                    yield BenchRow(impl, kernel, L, batch, d, n, 0, 0.0, 0, 0, 0.0, repeats, 1, float("nan"), "skipped")
                    continue
                if impl == "recurrent":
                    reference = y
                yield row


def write_csv(path, rows: Iterable[BenchRow]) -> list[BenchRow]:
    rows = list(rows)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=[f.name for f in fields(BenchRow)])
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))
    return rows
