"""Kernel backend selection.

The hot loops (distance transforms, feature evaluation, split search,
tree traversal, max-flow) exist twice: a Cython extension (``core``) and
a pure numpy/Python fallback (``pure``) with identical signatures and
matching arithmetic. The compiled module is preferred when the extension
was built; ``CTXFOREST_BACKEND=pure|compiled|auto`` overrides.

All call sites go through the module attribute ``impl`` so tests and
benchmarks can swap backends.
"""

import os

from . import pure

try:
    from . import core as _compiled
except ImportError:
    _compiled = None

_requested = os.environ.get("CTXFOREST_BACKEND", "auto").strip().lower() or "auto"
if _requested == "auto":
    impl = _compiled if _compiled is not None else pure
elif _requested == "compiled":
    if _compiled is None:
        raise ImportError(
            "CTXFOREST_BACKEND=compiled but the ctxforest._kernels.core extension is not built"
        )
    impl = _compiled
elif _requested == "pure":
    impl = pure
else:
    raise ImportError(f"unknown CTXFOREST_BACKEND value {_requested!r}")

BACKEND = "pure" if impl is pure else "compiled"


def available_backends():
    """Mapping of backend name -> kernel module, for benchmarks and tests."""
    out = {"pure": pure}
    if _compiled is not None:
        out["compiled"] = _compiled
    return out
