"""Order-preserving thread-pool map shared by the batch operations."""

from __future__ import annotations

import logging
import os
from collections.abc import Callable, Iterable
from concurrent.futures import ThreadPoolExecutor
from typing import TypeVar

logger = logging.getLogger(__name__)

THREADS_ENV = "FEATLM_THREADS"

T = TypeVar("T")
R = TypeVar("R")


def resolve_workers(max_workers: int | None = None) -> int:
    """Explicit ``max_workers`` wins, then ``FEATLM_THREADS``, then the CPU count."""
    if max_workers is not None:
        return max(1, max_workers)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            logger.warning("ignoring non-integer %s=%r", THREADS_ENV, env)
    return os.cpu_count() or 1


def parallel_map(
    fn: Callable[[T], R], items: Iterable[T], *, max_workers: int | None = None
) -> list[R]:
    """``[fn(x) for x in items]`` on a per-call pool; results keep input order."""
    work = list(items)
    workers = min(resolve_workers(max_workers), max(1, len(work)))
    if workers == 1:
        return [fn(item) for item in work]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, work))
