"""Ragged (unpadded) batch storage and conversions to and from padded grids.

A padded batch is a ``[batch_size, max_seq_len, ...]`` grid whose valid tokens
sit at the front of each row. The unpadded form keeps only the valid tokens in
one flat array plus ``batch_offset``, the exclusive prefix sum of the
per-sequence lengths with the total appended.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CapacityError, InvalidInputError, InvalidMaskError

DEFAULT_MAX_SEQ_LEN = 512


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SequenceLengths:
    lengths: tuple[int, ...]
    max_seq_len: int

    def __post_init__(self):
        object.__setattr__(self, "lengths", tuple(int(x) for x in self.lengths))
        if not self.lengths:
            raise InvalidInputError("lengths must be non-empty")
        if self.max_seq_len < 1:
            raise InvalidInputError(f"max_seq_len must be >= 1, got {self.max_seq_len}")
        bad = [x for x in self.lengths if not 1 <= x <= self.max_seq_len]
        if bad:
            raise InvalidInputError(
                f"lengths must lie in [1, {self.max_seq_len}]; offending values {bad[:5]}"
            )

    @property
    def batch_size(self) -> int:
        return len(self.lengths)

    @property
    def total_tokens(self) -> int:
        return sum(self.lengths)

    @classmethod
    def of(cls, lengths: Sequence[int], max_seq_len: int | None = None) -> "SequenceLengths":
        lengths = [int(x) for x in lengths]
        if max_seq_len is None:
            if not lengths:
                raise InvalidInputError("lengths must be non-empty")
            max_seq_len = max(lengths)
        return cls(tuple(lengths), int(max_seq_len))


def _as_lengths(lengths) -> SequenceLengths:
    if isinstance(lengths, SequenceLengths):
        return lengths
    return SequenceLengths.of(lengths)


@dataclass(frozen=True, eq=False)
class PaddedBatch:
    values: np.ndarray
    input_mask: np.ndarray
    pad_value: float | int = 0

    def __post_init__(self):
        values = np.asarray(self.values)
        mask = np.asarray(self.input_mask)
        if values.ndim < 2 or mask.ndim != 2 or values.shape[:2] != mask.shape:
            raise InvalidInputError(
                f"values {values.shape} and mask {mask.shape} must share the leading [batch, seq] dims"
            )
        if not np.isin(mask, (0, 1)).all():
            raise InvalidMaskError("mask entries must be 0 or 1")
        if not np.all(values[~mask.astype(bool)] == self.pad_value):
            raise InvalidInputError("positions with mask 0 must hold pad_value")
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "input_mask", _frozen(mask.astype(np.int8)))

    @property
    def batch_size(self) -> int:
        return self.values.shape[0]

    @property
    def max_seq_len(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other):
        if not isinstance(other, PaddedBatch):
            return NotImplemented
        return (
            self.values.dtype == other.values.dtype
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.input_mask, other.input_mask)
        )


@dataclass(frozen=True, eq=False)
class UnpaddedBatch:
    values: np.ndarray
    batch_offset: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        offs = np.asarray(self.batch_offset, dtype=np.int64)
        if values.ndim < 1:
            raise InvalidInputError("values must be at least 1-D")
        if offs.ndim != 1 or len(offs) < 2:
            raise InvalidInputError("batch_offset needs batch_size + 1 >= 2 entries")
        if offs[0] != 0 or np.any(np.diff(offs) < 0) or offs[-1] != len(values):
            raise InvalidInputError(
                "batch_offset must start at 0, be nondecreasing and end at len(values)"
            )
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "batch_offset", _frozen(offs))

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.batch_offset)

    @property
    def batch_size(self) -> int:
        return len(self.batch_offset) - 1

    def sequence(self, b: int) -> np.ndarray:
        return self.values[self.batch_offset[b] : self.batch_offset[b + 1]]

    def __eq__(self, other):
        if not isinstance(other, UnpaddedBatch):
            return NotImplemented
        return (
            self.values.dtype == other.values.dtype
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.batch_offset, other.batch_offset)
        )


def compute_batch_offset(lengths) -> np.ndarray:
    """``[2, 1, 3] -> [0, 2, 3, 6]``."""
    if not isinstance(lengths, SequenceLengths):
        if len(lengths) == 0:
            raise InvalidInputError("lengths must be non-empty")
        lengths = _as_lengths(lengths)
    offs = np.zeros(lengths.batch_size + 1, dtype=np.int64)
    np.cumsum(lengths.lengths, out=offs[1:])
    return offs


def mask_lengths(mask: np.ndarray) -> np.ndarray:
    """Per-row valid counts of a prefix mask; raises on holes."""
    mask = np.asarray(mask)
    lengths = mask.sum(axis=1).astype(np.int64)
    expected = np.arange(mask.shape[1])[None, :] < lengths[:, None]
    if not np.array_equal(mask.astype(bool), expected):
        rows = np.flatnonzero((mask.astype(bool) != expected).any(axis=1))
        raise InvalidMaskError(f"mask rows {rows[:5].tolist()} are not prefix-contiguous")
    return lengths


def mask_from_lengths(lengths: Sequence[int], max_seq_len: int) -> np.ndarray:
    lengths = np.asarray(lengths, dtype=np.int64)
    return (np.arange(max_seq_len)[None, :] < lengths[:, None]).astype(np.int8)


def unpad(padded: PaddedBatch) -> UnpaddedBatch:
    """Gather the valid tokens of a padded batch into flat storage."""
    lengths = mask_lengths(padded.input_mask)
    offs = np.zeros(len(lengths) + 1, dtype=np.int64)
    np.cumsum(lengths, out=offs[1:])
    return UnpaddedBatch(padded.values[padded.input_mask.astype(bool)], offs)


def pad(unpadded: UnpaddedBatch, max_seq_len: int, pad_value=0) -> PaddedBatch:
    """Scatter flat tokens back into a ``[batch, max_seq_len, ...]`` grid."""
    lengths = unpadded.lengths
    if len(lengths) and lengths.max() > max_seq_len:
        raise CapacityError(
            f"sequence of length {int(lengths.max())} exceeds max_seq_len={max_seq_len}"
        )
    mask = mask_from_lengths(lengths, max_seq_len)
    feat = unpadded.values.shape[1:]
    grid = np.full((len(lengths), max_seq_len, *feat), pad_value, dtype=unpadded.values.dtype)
    grid[mask.astype(bool)] = unpadded.values
    return PaddedBatch(grid, mask, pad_value)


def nonzero_indices(mask: np.ndarray) -> np.ndarray:
    """Row-major flat positions of the 1 entries of ``mask``."""
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise InvalidMaskError("mask entries must be 0 or 1")
    return np.flatnonzero(mask).astype(np.int64)


@dataclass(frozen=True)
class Redundancy:
    valid_tokens: int
    padded_tokens: int
    theoretical_speedup: float

    def as_dict(self) -> dict:
        return {
            "valid_tokens": self.valid_tokens,
            "padded_tokens": self.padded_tokens,
            "theoretical_speedup": self.theoretical_speedup,
        }


def redundancy_ratio(lengths: SequenceLengths) -> Redundancy:
    lengths = _as_lengths(lengths)
    valid = lengths.total_tokens
    padded = lengths.batch_size * lengths.max_seq_len
    return Redundancy(valid, padded, padded / valid)


# -- synthetic lengths -------------------------------------------------------

Histogram = list[tuple[int, float]]


def validate_histogram(histogram, max_seq_len: int | None = None) -> Histogram:
    bins = [(int(u), float(p)) for u, p in histogram]
    if not bins:
        raise InvalidInputError("histogram needs at least one bin")
    uppers = [u for u, _ in bins]
    if len(set(uppers)) != len(uppers):
        raise InvalidInputError("histogram bins must have distinct uppers")
    if any(p < 0 or not np.isfinite(p) for _, p in bins):
        raise InvalidInputError("histogram probabilities must be finite and >= 0")
    total = sum(p for _, p in bins)
    if abs(total - 1.0) > 1e-9:
        raise InvalidInputError(f"histogram probabilities sum to {total!r}, expected 1")
    limit = max_seq_len if max_seq_len is not None else max(uppers)
    if any(not 0 < u <= limit for u in uppers):
        raise InvalidInputError(f"histogram bins must lie in (0, {limit}]")
    return sorted(bins)


def gen_lengths(histogram, n: int, seed: int, max_seq_len: int | None = None) -> SequenceLengths:
    """Draw ``n`` lengths by inverse-CDF sampling over the histogram bins.

    Each bin is a point mass at its ``upper`` length. Uniform variates come
    from numpy's PCG64 generator seeded with ``seed``, so a seed reproduces the
    same lengths on any platform running the same numpy major version.
    """
    bins = validate_histogram(histogram, max_seq_len)
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    uppers = np.array([u for u, _ in bins], dtype=np.int64)
    cdf = np.cumsum([p for _, p in bins])
    u = np.random.Generator(np.random.PCG64(seed)).random(n)
    # rounding can leave cdf[-1] a hair below 1; clamp onto the last live bin
    last_live = max(i for i, (_, p) in enumerate(bins) if p > 0)
    idx = np.minimum(np.searchsorted(cdf, u, side="right"), last_live)
    limit = max_seq_len if max_seq_len is not None else int(uppers.max())
    return SequenceLengths(tuple(uppers[idx].tolist()), limit)


# -- file formats ------------------------------------------------------------


def read_lengths(path, max_seq_len: int | None = None) -> SequenceLengths:
    """Read a lengths file: one integer per line, or ``{"max_seq_len", "lengths"}`` JSON."""
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        doc = json.loads(text)
        if set(doc) - {"max_seq_len", "lengths"}:
            raise InvalidInputError(f"unknown keys in lengths file: {sorted(set(doc) - {'max_seq_len', 'lengths'})}")
        return SequenceLengths.of(doc["lengths"], max_seq_len or doc.get("max_seq_len"))
    try:
        values = [int(line) for line in text.splitlines() if line.strip()]
    except ValueError as exc:
        raise InvalidInputError(f"{path}: {exc}") from None
    return SequenceLengths.of(values, max_seq_len)


def write_lengths(path, lengths: SequenceLengths) -> None:
    Path(path).write_text("".join(f"{x}\n" for x in lengths.lengths), encoding="utf-8")


def read_histogram(path) -> Histogram:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        return [(b["upper"], b["p"]) for b in doc]
    except (TypeError, KeyError) as exc:
        raise InvalidInputError(f"histogram bins need 'upper' and 'p' keys: {exc}") from None
