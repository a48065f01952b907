"""
Seeded random streams and chunked parallel map.

Every random draw in the toolkit comes from stream(seed, label, index):
one SeedSequence namespace per run, split by module label and work-unit
index. Work is cut into fixed-size chunks so the chunk -> stream mapping,
and therefore the output, does not depend on the worker count.
"""
import zlib
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, TypeVar

import numpy as np

from app.core.config import get_settings

T = TypeVar("T")


def stream(seed: int, label: str, index: int = 0) -> np.random.Generator:
    """
    Independent generator for (seed, label, index).

    Args:
        seed: Run seed
        label: Module stream label, e.g. "states.sample"
        index: Work-unit or resample index

    Returns:
        numpy Generator backed by PCG64
    """
    key = (zlib.crc32(label.encode("utf-8")), int(index))
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.default_rng(sequence)


def chunk_bounds(count: int, chunk_size: int | None = None) -> list[tuple[int, int]]:
    """Half-open [start, stop) ranges covering count items."""
    size = chunk_size or get_settings().chunk_size
    return [(start, min(start + size, count)) for start in range(0, count, size)]


def map_chunks(
    func: Callable[[int, int, int], T],
    count: int,
    jobs: int | None = None,
    chunk_size: int | None = None,
) -> list[T]:
    """
    Apply func(chunk_index, start, stop) over fixed-size chunks.

    Results are returned in chunk order whatever the worker count.
    """
    bounds = chunk_bounds(count, chunk_size)
    workers = jobs if jobs is not None else get_settings().resolved_jobs
    if workers <= 1 or len(bounds) <= 1:
        return [func(i, start, stop) for i, (start, stop) in enumerate(bounds)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(func, i, start, stop) for i, (start, stop) in enumerate(bounds)]
        return [future.result() for future in futures]
