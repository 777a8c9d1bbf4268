"""Order-preserving process pool map with BLAS pinned to one thread.

Each task runs with a single BLAS thread whether it executes in the
parent or in a worker, so numerical results do not depend on the number
of workers.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor

from threadpoolctl import threadpool_limits


def _single_thread():
    threadpool_limits(limits=1)


def pmap(func, items, n_jobs=1):
    """``[func(x) for x in items]``, optionally over `n_jobs` processes.

    `func` must be picklable (a module-level function or a partial of one).
    """
    items = list(items)
    if n_jobs is None or n_jobs <= 1 or len(items) <= 1:
        with threadpool_limits(limits=1):
            return [func(x) for x in items]
    with ProcessPoolExecutor(max_workers=n_jobs, initializer=_single_thread) as ex:
        return list(ex.map(func, items))
