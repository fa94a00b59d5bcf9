"""Seed schedules and replayable random streams.

Every stochastic task is keyed by ``(master_seed, *keys)`` and gets its own
counter-based Philox stream, so results do not depend on how tasks are
split across workers or in what order they run.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

MASK64 = (1 << 64) - 1


def check_seed(seed) -> int:
    s = int(seed)
    if s < 0 or s > MASK64:
        raise ValueError("seed must be a 64-bit unsigned value")
    return s


def seed_sequence(master: int, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(check_seed(master), spawn_key=tuple(int(k) for k in keys))


def generator(master: int, *keys: int) -> np.random.Generator:
    """Philox generator for the stream identified by ``(master, *keys)``."""
    return np.random.Generator(np.random.Philox(seed_sequence(master, *keys)))


def derive_seed(master: int, *keys: int) -> int:
    """Deterministic 64-bit child seed (the per-draw s_n)."""
    return int(seed_sequence(master, *keys).generate_state(1, np.uint64)[0])


def dyad_uniforms(seed: int, shape) -> np.ndarray:
    """Uniforms for every dyad of a draw; entry (i, j) is fixed by the seed.

    Re-calling with the same seed reproduces the same matrix, which is how
    a draw is "re-seeded" at every fixed-point iteration.
    """
    return generator(seed).random(shape)


def default_workers() -> int:
    env = os.environ.get("TRIADNET_WORKERS")
    if env:
        return max(int(env), 1)
    return 1


def _run_pinned(args):
    fn, item, threads = args
    with threadpool_limits(limits=threads):
        return fn(item)


def parallel_map(fn: Callable, items: Sequence | Iterable, workers: int | None = None, blas_threads: int = 1) -> list:
    """Ordered map over ``items``; ``fn`` must be picklable for workers > 1.

    BLAS is pinned to ``blas_threads`` inside each task so floating point
    reductions do not change with the machine's thread count.
    """
    items = list(items)
    workers = default_workers() if workers is None else max(int(workers), 1)
    if workers == 1 or len(items) <= 1:
        return [_run_pinned((fn, it, blas_threads)) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_run_pinned, [(fn, it, blas_threads) for it in items], chunksize=max(len(items) // (4 * workers), 1)))
