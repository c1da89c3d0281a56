"""Embedding lookup and two weight-gradient strategies.

``embedding_backward_sorted`` groups positions by token id with a stable sort
and sums each group in ascending position order. ``embedding_backward_scatter``
accumulates rows straight into the gradient table in an arbitrary arrival
order (a seeded permutation stands in for conflicting atomic adds), touching
``lane_width`` adjacent columns per update to mirror paired half-precision
atomics.
"""
from __future__ import annotations

import numpy as np

from . import kernels
from .errors import InvalidInputError, PackingError


def _indices(indices, vocab_size: int) -> np.ndarray:
    idx = np.ascontiguousarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= vocab_size):
        bad = idx[(idx < 0) | (idx >= vocab_size)]
        raise IndexError(f"token ids {bad[:5].tolist()} outside [0, {vocab_size})")
    return idx


def _grad(out_grad, n: int) -> np.ndarray:
    g = np.ascontiguousarray(out_grad, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] != n:
        raise InvalidInputError(f"out_grad shape {g.shape} does not match {n} indices")
    return g


def embedding_forward(table, indices) -> np.ndarray:
    table = np.asarray(table)
    if table.ndim != 2 or min(table.shape) < 1:
        raise InvalidInputError(f"table must be a non-empty [vocab, dim] matrix, got {table.shape}")
    return table[_indices(indices, table.shape[0])]


def embedding_backward_sorted(out_grad, indices, vocab_size: int, dim: int | None = None) -> np.ndarray:
    idx = _indices(indices, vocab_size)
    if idx.size == 0 and dim is not None:
        return np.zeros((vocab_size, dim))
    g = _grad(out_grad, len(idx))
    out = np.zeros((vocab_size, g.shape[1]))
    order = np.argsort(idx, kind="stable")
    kernels.segment_sum_sorted(g, np.ascontiguousarray(order, dtype=np.int64), np.ascontiguousarray(idx[order]), out)
    return out


def arrival_order(n: int, seed: int | None) -> np.ndarray:
    """Positions in the order their updates land; ``seed=None`` keeps program order."""
    if seed is None:
        return np.arange(n, dtype=np.int64)
    return np.random.default_rng(seed).permutation(n).astype(np.int64)


def embedding_backward_scatter(out_grad, indices, vocab_size: int, lane_width: int = 2,
                               seed: int | None = 0, dim: int | None = None) -> np.ndarray:
    if lane_width not in (1, 2):
        raise PackingError(f"lane_width must be 1 or 2, got {lane_width}")
    idx = _indices(indices, vocab_size)
    if idx.size == 0 and dim is not None:
        g = np.zeros((0, dim))
    else:
        g = _grad(out_grad, len(idx))
    if g.shape[1] % lane_width:
        raise PackingError(f"dim {g.shape[1]} is not divisible by lane_width {lane_width}")
    out = np.zeros((vocab_size, g.shape[1]))
    kernels.scatter_accumulate(g, idx, arrival_order(len(idx), seed), lane_width, out)
    return out
