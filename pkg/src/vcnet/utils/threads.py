"""
Deterministic data-parallel helpers.

A batch is cut into contiguous shards, each shard runs on its own worker
thread (each with its own tape), and the results come back in shard order
so the reduction never depends on scheduling.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Sequence, Tuple, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")


def shard_bounds(n: int, workers: int) -> List[Tuple[int, int]]:
    """Split range(n) into at most ``workers`` contiguous, near-equal shards."""
    if n < 1:
        return []
    workers = max(1, min(workers, n))
    base, extra = divmod(n, workers)
    bounds, start = [], 0
    for i in range(workers):
        stop = start + base + (1 if i < extra else 0)
        bounds.append((start, stop))
        start = stop
    return bounds


class ShardPool:
    """Thread pool that maps a shard function over a batch, results in shard order."""

    def __init__(self, workers: int = 1):
        self.workers = max(1, int(workers))
        self._executor = ThreadPoolExecutor(max_workers=self.workers) if self.workers > 1 else None

    def map(self, fn: Callable[[int, int], T], n: int) -> List[Tuple[int, T]]:
        """Run ``fn(start, stop)`` per shard; returns (shard size, result) pairs."""
        bounds = shard_bounds(n, self.workers)
        if self._executor is None or len(bounds) == 1:
            return [(stop - start, fn(start, stop)) for start, stop in bounds]
        futures = [self._executor.submit(fn, start, stop) for start, stop in bounds]
        return [(stop - start, f.result()) for (start, stop), f in zip(bounds, futures)]

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def __enter__(self) -> "ShardPool":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def weighted_sum(results: Sequence[Tuple[int, float]]) -> float:
    """Size-weighted mean of per-shard scalars, accumulated in shard order."""
    total = sum(size for size, _ in results)
    acc = 0.0
    for size, value in results:
        acc += value * (size / total)
    return acc
