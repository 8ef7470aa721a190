"""Order-preserving worker pool; results never depend on the worker count."""
import os
from concurrent.futures import ThreadPoolExecutor


def default_threads():
    try:
        return max(1, int(os.environ.get("SELFSEG_THREADS", "1")))
    except ValueError:
        return 1


def ordered_map(fn, items, threads=None):
    items = list(items)
    threads = default_threads() if threads is None else max(1, int(threads))
    if threads == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
