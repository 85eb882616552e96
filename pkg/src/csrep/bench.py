"""Throughput measurement in frames per second."""

from __future__ import annotations

import threading
import time
from dataclasses import asdict, dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .graph import ModelGraph, forward


@dataclass(frozen=True)
class BenchResult:
    frames_processed: int
    wall_seconds: float
    frames_per_second: float
    batch: int
    frames_per_utterance: int
    threads: int
    warmup_iters: int
    measured_iters: int

    def as_dict(self) -> dict:
        return asdict(self)


def benchmark(model: ModelGraph, batch: int = 1, frames: int = 300, warmup: int = 5, iters: int = 50,
              threads: int = 1, seed: int = 0) -> BenchResult:
    """Time ``iters`` forward passes on a fixed random input after ``warmup`` passes.

    BLAS is pinned to one thread per worker. With ``threads > 1`` the
    iterations are split across that many Python threads sharing the model.
    """
    if batch < 1 or frames < 1 or iters < 1 or warmup < 0 or threads < 1:
        raise ValueError("batch, frames, iters and threads must be positive; warmup non-negative")
    x = np.random.default_rng(seed).standard_normal((batch, model.input_channels, frames)).astype(model.dtype)
    share = [iters // threads + (k < iters % threads) for k in range(threads)]

    def work(n):
        for _ in range(n):
            forward(model, x)

    with threadpool_limits(limits=1):
        work(warmup)
        if threads == 1:
            t0 = time.perf_counter()
            work(iters)
            wall = time.perf_counter() - t0
        else:
            workers = [threading.Thread(target=work, args=(n,)) for n in share if n]
            t0 = time.perf_counter()
            for w in workers:
                w.start()
            for w in workers:
                w.join()
            wall = time.perf_counter() - t0
    processed = batch * frames * iters
    return BenchResult(processed, wall, processed / wall, batch, frames, threads, warmup, iters)
