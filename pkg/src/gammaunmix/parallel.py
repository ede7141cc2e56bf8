"""Order-preserving process pool over per-spectrum work."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, Sequence

_CONTEXT = None


def _init(context):
    global _CONTEXT
    _CONTEXT = context


def _call(args):
    worker, item = args
    return worker(_CONTEXT, item)


def run_parallel(worker: Callable, context, items: Sequence, jobs: int = 1, chunksize: int | None = None) -> list:
    """``[worker(context, item) for item in items]``, optionally across ``jobs`` processes.

    ``worker`` must be a module-level function; ``context`` is shipped once
    per worker process.  Results come back in input order whatever ``jobs``
    is, so outputs never depend on the parallelism level.
    """
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [worker(context, it) for it in items]
    if chunksize is None:
        chunksize = max(1, len(items) // (4 * jobs))
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init, initargs=(context,)) as ex:
        return list(ex.map(_call, [(worker, it) for it in items], chunksize=chunksize))


def chunks(n: int, size: int) -> Iterable[range]:
    for start in range(0, n, size):
        yield range(start, min(start + size, n))
