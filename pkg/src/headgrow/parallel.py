import os
from concurrent.futures import ThreadPoolExecutor

ENV_THREADS = "HEADGROW_THREADS"


def worker_count(requested: int | None = None) -> int:
    """Resolve the worker count: env var, then explicit request, then CPU count."""
    env = os.environ.get(ENV_THREADS)
    if env:
        return max(1, int(env))
    if requested:
        return max(1, int(requested))
    return os.cpu_count() or 1


def pmap(fn, items, workers: int | None = None) -> list:
    """Order-preserving map; results never depend on the worker count."""
    items = list(items)
    n = worker_count(workers)
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
