"""Kernel backend selection.

The compiled Cython module is used when it was built; otherwise the numpy
fallback is used. Both are importable directly for benchmarking and parity
tests via :data:`compiled` and :data:`fallback`.
"""
from . import _pykernels as fallback

try:
    from . import _ckernels as compiled
except ImportError:  # extension not built
    compiled = None

_impl = compiled if compiled is not None else fallback
BACKEND = "compiled" if compiled is not None else "numpy"

chunk_sumsq = _impl.chunk_sumsq
scatter_accumulate = _impl.scatter_accumulate
segment_sum_sorted = _impl.segment_sum_sorted

__all__ = ["BACKEND", "compiled", "fallback", "chunk_sumsq", "scatter_accumulate", "segment_sum_sorted"]
