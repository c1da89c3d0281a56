"""Reference multi-head attention in padded-masked and unpadded layouts.

Both paths compute ``softmax(Q_h K_h^T / sqrt(d_k)) V_h`` per head in float64.
The padded path masks invalid key columns with ``-inf`` and zeroes invalid
query rows; the unpadded path works on each ``batch_offset`` slice alone.
Dropout is not applied.
"""
from __future__ import annotations

import numpy as np

from .errors import InvalidInputError
from .varlen import mask_lengths


def _check_heads(d_model: int, num_heads: int) -> int:
    if num_heads < 1 or d_model % num_heads:
        raise InvalidInputError(f"d_model={d_model} is not divisible by num_heads={num_heads}")
    return d_model // num_heads


def _split_heads(x: np.ndarray, num_heads: int) -> np.ndarray:
    # [..., tokens, d_model] -> [..., heads, tokens, d_k]
    *lead, t, d = x.shape
    return np.moveaxis(x.reshape(*lead, t, num_heads, d // num_heads), -2, -3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    x = np.moveaxis(x, -3, -2)
    *lead, t, h, dk = x.shape
    return x.reshape(*lead, t, h * dk)


def stable_softmax(logits: np.ndarray) -> np.ndarray:
    """Row softmax with max subtraction; rows that are entirely ``-inf`` give zeros."""
    m = np.max(logits, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(logits - m)
    s = e.sum(axis=-1, keepdims=True)
    return np.divide(e, s, out=np.zeros_like(e), where=s > 0)


def attention_weights_padded(q, k, mask, num_heads: int) -> np.ndarray:
    """Per-head weights ``[batch, heads, L, L]`` with masked keys at exactly 0."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    d_k = _check_heads(q.shape[-1], num_heads)
    lengths = mask_lengths(mask)
    qh, kh = _split_heads(q, num_heads), _split_heads(k, num_heads)
    logits = qh @ np.swapaxes(kh, -1, -2) / np.sqrt(d_k)
    key_valid = np.arange(q.shape[1])[None, :] < lengths[:, None]
    logits = np.where(key_valid[:, None, None, :], logits, -np.inf)
    w = stable_softmax(logits)
    query_valid = key_valid[:, None, :, None]
    return np.where(query_valid, w, 0.0)


def mha_padded(q, k, v, mask, num_heads: int) -> np.ndarray:
    """Masked attention over ``[batch, max_seq_len, d_model]`` inputs.

    Padded query rows of the output are exactly zero.
    """
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    mask = np.asarray(mask)
    if not (q.shape == k.shape == v.shape) or q.ndim != 3 or q.shape[:2] != mask.shape:
        raise InvalidInputError(
            f"q {q.shape}, k {k.shape}, v {v.shape} must match each other and mask {mask.shape}"
        )
    w = attention_weights_padded(q, k, mask, num_heads)
    out = _merge_heads(w @ _split_heads(v, num_heads))
    valid = mask.astype(bool)[:, :, None]
    return np.where(valid, out, 0.0)


def _attend(q, k, v, num_heads: int) -> np.ndarray:
    d_k = q.shape[-1] // num_heads
    qh, kh, vh = (_split_heads(a, num_heads) for a in (q, k, v))
    w = stable_softmax(qh @ np.swapaxes(kh, -1, -2) / np.sqrt(d_k))
    return _merge_heads(w @ vh)


def mha_unpadded(q, k, v, batch_offset, num_heads: int) -> np.ndarray:
    """Attention over flat ``[total_tokens, d_model]`` inputs, one slice per sequence."""
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    offs = np.asarray(batch_offset, dtype=np.int64)
    if not (q.shape == k.shape == v.shape) or q.ndim != 2:
        raise InvalidInputError(f"q {q.shape}, k {k.shape}, v {v.shape} must be equal 2-D shapes")
    _check_heads(q.shape[-1], num_heads)
    if offs.ndim != 1 or len(offs) < 2 or offs[0] != 0 or offs[-1] != len(q) or np.any(np.diff(offs) < 0):
        raise InvalidInputError("batch_offset is inconsistent with the token count")
    out = np.zeros_like(q)
    for lo, hi in zip(offs[:-1], offs[1:]):
        if hi > lo:
            out[lo:hi] = _attend(q[lo:hi], k[lo:hi], v[lo:hi], num_heads)
    return out
