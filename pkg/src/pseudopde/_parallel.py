"""Process-level fan-out for independent node jobs.

Workers are forked so that closures (model coefficients, drivers) need not
be picklable; only job indices travel to the children.  Results come back in
job order, so output never depends on the worker count.
"""

from __future__ import annotations

import multiprocessing

_JOB = None


def _run(index):
    return _JOB(index)


def parallel_map(fn, items, workers=1):
    items = list(items)
    workers = int(workers or 1)
    if workers <= 1 or len(items) < 2 or "fork" not in multiprocessing.get_all_start_methods():
        return [fn(item) for item in items]
    global _JOB
    _JOB = lambda i: fn(items[i])  # noqa: E731
    try:
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(min(workers, len(items))) as pool:
            return pool.map(_run, range(len(items)), chunksize=max(1, len(items) // (4 * workers)))
    finally:
        _JOB = None
