"""Multi-tensor-apply launch planning and chunked LAMB norm references.

Each launch carries a fixed-size metadata argument. The per-tensor layout
records an address and size per tensor plus a (tensor, chunk) pair per block;
the contiguous layout records a single base address, which frees argument
bytes for more blocks per launch.

Norms are computed from per-chunk partial sums of squares, combined in
ascending (tensor, chunk) order so results are reproducible.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .errors import InvalidInputError, NumericDomainError


@dataclass(frozen=True)
class TensorDesc:
    tensor_id: int
    numel: int

    def __post_init__(self):
        if self.numel < 1:
            raise InvalidInputError(f"tensor {self.tensor_id} must have numel >= 1")


def descs(numels: Sequence[int]) -> tuple[TensorDesc, ...]:
    return tuple(TensorDesc(i, int(n)) for i, n in enumerate(numels))


@dataclass(frozen=True)
class ChunkMetaBudget:
    max_tensor_num: int = 110
    max_chunk_num: int = 320
    pointer_bytes: int = 8
    int_bytes: int = 4
    byte_bytes: int = 1
    arg_budget_bytes: int = 4096

    def __post_init__(self):
        if self.max_tensor_num < 1 or self.max_chunk_num < 1:
            raise InvalidInputError("max_tensor_num and max_chunk_num must be >= 1")
        size = metadata_size(self.max_tensor_num, self.max_chunk_num, self)
        if size > self.arg_budget_bytes:
            raise InvalidInputError(
                f"metadata of {size} bytes exceeds the {self.arg_budget_bytes}-byte argument budget"
            )

    @classmethod
    def from_dict(cls, doc: dict) -> "ChunkMetaBudget":
        known = set(cls.__dataclass_fields__)
        if set(doc) - known:
            raise InvalidInputError(f"unknown budget keys: {sorted(set(doc) - known)}")
        return cls(**doc)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def metadata_size(max_tensor_num: int, max_chunk_num: int, budget: ChunkMetaBudget | None = None,
                  contiguous: bool = False) -> int:
    """Bytes of one launch argument.

    Per-tensor layout: ``addresses[T] + sizes[T] + block_to_tensor[C] +
    block_to_chunk[C] + start_tensor``. The contiguous layout replaces the two
    per-tensor arrays with one base pointer.
    """
    b = budget if budget is not None else ChunkMetaBudget()
    per_chunk = max_chunk_num * (b.byte_bytes + b.int_bytes)
    if contiguous:
        return b.pointer_bytes + per_chunk + b.int_bytes
    return max_tensor_num * (b.pointer_bytes + b.int_bytes) + per_chunk + b.int_bytes


def contiguous_max_chunk_num(budget: ChunkMetaBudget) -> int:
    """Largest block count whose contiguous-layout metadata fits the budget."""
    room = budget.arg_budget_bytes - budget.pointer_bytes - budget.int_bytes
    return room // (budget.byte_bytes + budget.int_bytes)


@dataclass(frozen=True)
class Launch:
    tensors: tuple[int, ...]
    chunks: tuple[tuple[int, int], ...]  # (tensor_id, chunk_index within tensor)


@dataclass(frozen=True)
class LaunchPlan:
    launches: tuple[Launch, ...]
    chunk_size: int
    tensors: tuple[TensorDesc, ...]
    max_tensor_num: int
    max_chunk_num: int
    contiguous: bool = False
    metadata_bytes: int = 0

    @property
    def num_launches(self) -> int:
        return len(self.launches)

    @property
    def total_numel(self) -> int:
        return sum(t.numel for t in self.tensors)

    def chunk_ranges(self) -> list[tuple[int, int]]:
        """Flat ``[start, stop)`` buffer ranges of every chunk, in launch order."""
        offsets, acc = {}, 0
        for t in self.tensors:
            offsets[t.tensor_id] = acc
            acc += t.numel
        numel = {t.tensor_id: t.numel for t in self.tensors}
        out = []
        for launch in self.launches:
            for tid, c in launch.chunks:
                lo = offsets[tid] + c * self.chunk_size
                out.append((lo, min(lo + self.chunk_size, offsets[tid] + numel[tid])))
        return out

    def summary(self) -> dict:
        return {
            "launches": self.num_launches,
            "chunks": sum(len(l.chunks) for l in self.launches),
            "chunks_per_launch": [len(l.chunks) for l in self.launches],
            "max_tensor_num": self.max_tensor_num,
            "max_chunk_num": self.max_chunk_num,
            "metadata_bytes": self.metadata_bytes,
        }


def num_chunks(numel: int, chunk_size: int) -> int:
    return -(-numel // chunk_size)


def _greedy(tensors: Sequence[TensorDesc], chunk_size: int, max_tensor_num: int, max_chunk_num: int) -> tuple[Launch, ...]:
    launches = []
    cur_tensors: list[int] = []
    cur_chunks: list[tuple[int, int]] = []
    for t in tensors:
        for c in range(num_chunks(t.numel, chunk_size)):
            new_tensor = not cur_tensors or cur_tensors[-1] != t.tensor_id
            if len(cur_chunks) == max_chunk_num or (new_tensor and len(cur_tensors) == max_tensor_num):
                launches.append(Launch(tuple(cur_tensors), tuple(cur_chunks)))
                cur_tensors, cur_chunks = [], []
                new_tensor = True
            if new_tensor:
                cur_tensors.append(t.tensor_id)
            cur_chunks.append((t.tensor_id, c))
    if cur_chunks:
        launches.append(Launch(tuple(cur_tensors), tuple(cur_chunks)))
    return tuple(launches)


def plan_apex(tensors: Sequence[TensorDesc], chunk_size: int, budget: ChunkMetaBudget | None = None) -> LaunchPlan:
    """Greedy per-tensor planning: a new launch starts when the next chunk would
    exceed the block limit or would bring in one tensor too many. A tensor's
    chunks may straddle launches."""
    if chunk_size < 1:
        raise InvalidInputError("chunk_size must be >= 1")
    budget = budget or ChunkMetaBudget()
    tensors = tuple(tensors)
    launches = _greedy(tensors, chunk_size, budget.max_tensor_num, budget.max_chunk_num)
    size = metadata_size(budget.max_tensor_num, budget.max_chunk_num, budget)
    return LaunchPlan(launches, chunk_size, tensors, budget.max_tensor_num, budget.max_chunk_num, False, size)


def plan_contiguous(total_numel: int, chunk_size: int, budget: ChunkMetaBudget | None = None) -> LaunchPlan:
    """Plan over one flattened buffer, with the block limit re-derived from the
    smaller contiguous metadata under the same argument budget."""
    if chunk_size < 1:
        raise InvalidInputError("chunk_size must be >= 1")
    if total_numel < 1:
        raise InvalidInputError("total_numel must be >= 1")
    budget = budget or ChunkMetaBudget()
    max_chunks = contiguous_max_chunk_num(budget)
    if max_chunks < 1:
        raise InvalidInputError("argument budget too small for even one block")
    tensors = (TensorDesc(0, int(total_numel)),)
    launches = _greedy(tensors, chunk_size, 1, max_chunks)
    size = metadata_size(1, max_chunks, budget, contiguous=True)
    return LaunchPlan(launches, chunk_size, tensors, 1, max_chunks, True, size)


def shard_tensors(tensors: Sequence[TensorDesc], num_shards: int) -> list[tuple[TensorDesc, ...]]:
    """Split the flattened layout into ``num_shards`` near-equal contiguous shards.

    Each shard lists the tensor fragments it holds, keeping the original
    tensor ids. This is the per-worker view of a sharded optimizer.
    """
    if num_shards < 1:
        raise InvalidInputError("num_shards must be >= 1")
    total = sum(t.numel for t in tensors)
    size = -(-total // num_shards)
    shards: list[list[TensorDesc]] = [[] for _ in range(num_shards)]
    pos = 0
    for t in tensors:
        lo, hi = pos, pos + t.numel
        while lo < hi:
            s = lo // size
            cut = min(hi, (s + 1) * size)
            shards[s].append(TensorDesc(t.tensor_id, cut - lo))
            lo = cut
        pos = hi
    return [tuple(s) for s in shards]


def load_tensor_list(path) -> tuple[TensorDesc, ...]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    items = doc["tensors"] if isinstance(doc, dict) else doc
    return descs([t["numel"] if isinstance(t, dict) else t for t in items])


# -- chunked norms -----------------------------------------------------------


def _buffer(buf) -> np.ndarray:
    return np.ascontiguousarray(buf, dtype=np.float64)


def _check_plan(buf: np.ndarray, plan: LaunchPlan) -> None:
    if len(buf) != plan.total_numel:
        raise InvalidInputError(f"plan covers {plan.total_numel} elements but the buffer has {len(buf)}")


def _sorted_ranges(plan: LaunchPlan) -> np.ndarray:
    r = np.array(plan.chunk_ranges(), dtype=np.int64).reshape(-1, 2)
    return r[np.argsort(r[:, 0], kind="stable")]


def chunked_norm_case1(grads, plan: LaunchPlan) -> float:
    """Sum over parameters of squared gradient L2 norms (the global-clip input)."""
    buf = _buffer(grads)
    _check_plan(buf, plan)
    r = _sorted_ranges(plan)
    partials = kernels.chunk_sumsq(buf, np.ascontiguousarray(r[:, 0]), np.ascontiguousarray(r[:, 1]))
    total = 0.0
    for p in partials:
        total += p
    return total


def single_pass_sumsq(grads) -> float:
    """One reduction over the whole buffer; the alternative case-1 backend."""
    buf = _buffer(grads)
    return float(kernels.chunk_sumsq(buf, np.array([0], dtype=np.int64), np.array([len(buf)], dtype=np.int64))[0])


def _segment_norms(buf, segments: Sequence[TensorDesc], plan: LaunchPlan) -> np.ndarray:
    buf = _buffer(buf)
    _check_plan(buf, plan)
    if sum(s.numel for s in segments) != len(buf):
        raise InvalidInputError("segments do not tile the buffer")
    bounds = np.zeros(len(segments) + 1, dtype=np.int64)
    np.cumsum([s.numel for s in segments], out=bounds[1:])
    starts, stops, owner = [], [], []
    for lo, hi in _sorted_ranges(plan):
        s = int(np.searchsorted(bounds, lo, side="right")) - 1
        while lo < hi:
            cut = min(hi, int(bounds[s + 1]))
            starts.append(lo)
            stops.append(cut)
            owner.append(s)
            lo = cut
            s += 1
    partials = kernels.chunk_sumsq(buf, np.array(starts, dtype=np.int64), np.array(stops, dtype=np.int64))
    acc = [0.0] * len(segments)
    for s, p in zip(owner, partials):
        acc[s] += p
    return np.sqrt(np.array(acc))


def chunked_norm_case2(params, segments: Sequence[TensorDesc], plan: LaunchPlan) -> np.ndarray:
    """Per-parameter L2 norms of the weights."""
    return _segment_norms(params, segments, plan)


def chunked_norm_case3(updates, segments: Sequence[TensorDesc], plan: LaunchPlan) -> np.ndarray:
    """Per-parameter L2 norms of the trust-ratio (update) tensors."""
    return _segment_norms(updates, segments, plan)


# -- reference step ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LambState:
    params: np.ndarray
    exp_avg: np.ndarray
    exp_avg_sq: np.ndarray
    segments: tuple[TensorDesc, ...]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.01
    bias_correction: bool = True
    step: int = 0
    update: np.ndarray | None = field(default=None, repr=False)
    trust_ratio: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        n = sum(s.numel for s in self.segments)
        for name in ("params", "exp_avg", "exp_avg_sq"):
            a = np.array(getattr(self, name), dtype=np.float64)
            if a.shape != (n,):
                raise InvalidInputError(f"{name} has shape {a.shape}, expected ({n},)")
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @classmethod
    def zeros_like(cls, params, segments: Sequence[TensorDesc], **hyper) -> "LambState":
        params = np.asarray(params, dtype=np.float64)
        return cls(params, np.zeros_like(params), np.zeros_like(params), tuple(segments), **hyper)


def lamb_reference_step(state: LambState, grads, clip_threshold: float | None = 1.0,
                        chunk_size: int = 2048, budget: ChunkMetaBudget | None = None,
                        layout: str = "contiguous") -> LambState:
    """One LAMB update with global-norm clipping.

    ``g <- g * min(1, clip / sqrt(case1))``; Adam moments with optional bias
    correction; ``r = m_hat / (sqrt(v_hat) + eps) + wd * w``; per parameter
    ``w <- w - lr * (||w|| / ||r||) * r`` with the ratio taken as 1 when
    either norm is zero. Norms come from the chunked paths under ``layout``.
    """
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != state.params.shape:
        raise InvalidInputError(f"grads shape {g.shape} != params shape {state.params.shape}")
    for name, a in (("grads", g), ("params", state.params), ("exp_avg", state.exp_avg), ("exp_avg_sq", state.exp_avg_sq)):
        if not np.all(np.isfinite(a)):
            raise NumericDomainError(f"{name} contains non-finite values")
    if layout == "contiguous":
        plan = plan_contiguous(len(g), chunk_size, budget)
    elif layout == "apex":
        plan = plan_apex(state.segments, chunk_size, budget)
    else:
        raise InvalidInputError(f"unknown layout {layout!r}")

    if clip_threshold is not None:
        norm = math.sqrt(chunked_norm_case1(g, plan))
        if norm > clip_threshold:
            g = g * (clip_threshold / norm)

    b1, b2 = state.beta1, state.beta2
    m = b1 * state.exp_avg + (1 - b1) * g
    v = b2 * state.exp_avg_sq + (1 - b2) * (g * g)
    t = state.step + 1
    if state.bias_correction:
        m_hat, v_hat = m / (1 - b1**t), v / (1 - b2**t)
    else:
        m_hat, v_hat = m, v
    r = m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * state.params

    w_norm = chunked_norm_case2(state.params, state.segments, plan)
    r_norm = chunked_norm_case3(r, state.segments, plan)
    ratio = np.where((w_norm > 0) & (r_norm > 0), w_norm / np.where(r_norm > 0, r_norm, 1.0), 1.0)
    per_elem = np.repeat(ratio, [s.numel for s in state.segments])
    params = state.params - state.lr * per_elem * r
    if not np.all(np.isfinite(params)):
        raise NumericDomainError("update produced non-finite parameters")
    return replace(state, params=params, exp_avg=m, exp_avg_sq=v, step=t, update=r, trust_ratio=ratio)
