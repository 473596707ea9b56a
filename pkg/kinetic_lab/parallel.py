"""
Parallel map shared by assembly, spectrum scans and per-mode evolutions.
"""

import logging
from typing import Callable, Iterable, List, TypeVar

from joblib import Parallel, delayed

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def parallel_map(func: Callable[[T], R], items: Iterable[T], threads: int = 1) -> List[R]:
    """
    Apply func to every item, preserving input order.

    Args:
        func: Pure function of one argument
        items: Inputs
        threads: Worker count; 1 runs in-process

    Returns:
        List of results in input order
    """
    items = list(items)
    if threads is None or threads <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    logger.debug(f"Dispatching {len(items)} tasks to {threads} workers")
    return Parallel(n_jobs=threads, prefer="threads")(delayed(func)(item) for item in items)
