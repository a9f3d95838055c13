"""
Parallelism Settings
Reads the ECHL_NUM_THREADS cap and applies it to worker pools and BLAS
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from typing import Callable, Iterable, List, TypeVar

from threadpoolctl import threadpool_limits

from data.defaults import NUM_THREADS_ENV
from services.errors import ConfigError

logger = logging.getLogger(__name__)

T = TypeVar('T')
R = TypeVar('R')


def get_num_threads() -> int:
    """Thread cap from the environment; unset means 1 (serial)"""
    raw = os.environ.get(NUM_THREADS_ENV)
    if raw is None or raw.strip() == '':
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{NUM_THREADS_ENV} must be an integer, got {raw!r}")
    if value < 1:
        raise ConfigError(f"{NUM_THREADS_ENV} must be >= 1, got {value}")
    return value


def map_ordered(fn: Callable[[T], R], items: Iterable[T], num_threads: int = None) -> List[R]:
    """
    Apply fn to every item, preserving input order in the result

    Args:
        fn: pure function of one item
        items: work items
        num_threads: pool size (defaults to the environment cap)

    Returns:
        Results in the same order as items
    """
    items = list(items)
    workers = num_threads or get_num_threads()
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


@contextmanager
def blas_limits(num_threads: int = None):
    """Cap BLAS/OpenMP threads for the enclosed block"""
    workers = num_threads or get_num_threads()
    logger.debug(f"Limiting BLAS threads to {workers}")
    with threadpool_limits(limits=workers):
        yield
