"""
Order-preserving parallel map over independent work items.

Subjects are independent given the parameters, so per-subject filtering,
simulation and bootstrap replicates are dispatched through joblib. Results
always come back in input order, which keeps every downstream reduction
deterministic regardless of the worker count.
"""

from typing import Callable, List, Optional, Sequence, TypeVar

import structlog
from joblib import Parallel, delayed

logger = structlog.get_logger()

T = TypeVar("T")
R = TypeVar("R")


def resolve_threads(threads: Optional[int]) -> int:
    """None or values below 1 fall back to a single worker."""
    if threads is None or threads < 1:
        return 1
    return int(threads)


def parallel_map(
    func: Callable[[T], R],
    items: Sequence[T],
    threads: Optional[int] = 1,
    prefer: str = "processes",
) -> List[R]:
    """
    Apply ``func`` to every item, optionally across ``threads`` joblib workers.

    Args:
        func: picklable callable (module-level function or functools.partial)
        items: work items
        threads: worker count; 1 runs inline without joblib overhead
        prefer: joblib backend hint, "processes" or "threads"

    Returns:
        Results in the order of ``items``
    """
    n_jobs = resolve_threads(threads)
    if n_jobs == 1 or len(items) <= 1:
        return [func(item) for item in items]
    logger.debug("Dispatching parallel map", items=len(items), n_jobs=n_jobs, prefer=prefer)
    return list(Parallel(n_jobs=n_jobs, prefer=prefer)(delayed(func)(item) for item in items))
