"""Seeding and worker-pool helpers.

All randomness in the package flows from one master seed through named
substreams, so individual stages (per tree, per pass, per phantom) are
reproducible in isolation and results do not depend on thread count.
"""

import dataclasses
import os
import zlib
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .errors import ValidationError


def substream(seed, *path):
    """Derive an independent RNG from ``seed`` and a path of names/indices.

    Path components may be ints or short strings; strings are hashed with
    crc32 so the entropy tuple is stable across runs and platforms.
    """
    ints = [zlib.crc32(p.encode()) if isinstance(p, str) else int(p) for p in path]
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + ints))


def check_fields(cls, d, what):
    """Reject config dicts with keys the dataclass does not declare."""
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - allowed
    if unknown:
        raise ValidationError(f"{what}: unknown config keys {sorted(unknown)}")


def default_threads():
    env = os.environ.get("CTXFOREST_THREADS")
    if env:
        try:
            n = int(env)
            if n >= 1:
                return n
        except ValueError:
            pass
    return os.cpu_count() or 1


def parallel_map(fn, items, threads=None):
    """Map ``fn`` over ``items`` preserving order.

    Each item must be independent and ``fn`` deterministic, so the result
    is identical for any worker count.
    """
    items = list(items)
    threads = threads or default_threads()
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
