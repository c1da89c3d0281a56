"""Padding exchange: all-gather, sort by valid tokens, interleave-slice.

Every worker runs the same three steps on the same gathered data, so each
arrives at the same assignment without further communication. Sorting before
dealing out positions ``i, i + W, i + 2W, ...`` bounds the spread of
per-worker token sums by the gap between the longest and shortest sample.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

from .errors import AllGatherShapeError, InvalidInputError, SlicingError


@dataclass(frozen=True)
class Sample:
    sample_id: int
    valid_tokens: int
    payload: Any = None


@dataclass(frozen=True)
class WorkerShard:
    worker_id: int
    samples: tuple[Sample, ...]

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))

    @property
    def tokens(self) -> int:
        return sum(s.valid_tokens for s in self.samples)


def shards_from_lengths(lengths_per_worker: Sequence[Sequence[int]]) -> list[WorkerShard]:
    """Number samples globally in worker-major order: worker 0's first sample is id 0."""
    shards, next_id = [], 0
    for w, lengths in enumerate(lengths_per_worker):
        samples = []
        for n in lengths:
            samples.append(Sample(next_id, int(n)))
            next_id += 1
        shards.append(WorkerShard(w, tuple(samples)))
    return shards


def _check_shards(shards: Sequence[WorkerShard]) -> list[WorkerShard]:
    if not shards:
        raise InvalidInputError("at least one worker shard is required")
    ordered = sorted(shards, key=lambda s: s.worker_id)
    ids = [s.worker_id for s in ordered]
    if ids != list(range(len(ordered))):
        raise InvalidInputError(f"worker ids must be dense 0..W-1, got {ids}")
    sizes = {len(s.samples) for s in ordered}
    if len(sizes) != 1:
        raise AllGatherShapeError(f"all-gather needs equal samples per worker, got sizes {sorted(sizes)}")
    ids = [s.sample_id for shard in ordered for s in shard.samples]
    if len(set(ids)) != len(ids):
        raise InvalidInputError("global sample ids must be unique across workers")
    return ordered


def all_gather(shards: Sequence[WorkerShard]) -> list[Sample]:
    """Concatenate shards in worker-id order, whatever order they are passed in."""
    return [s for shard in _check_shards(shards) for s in shard.samples]


def sort_by_valid_tokens(samples: Sequence[Sample]) -> list[Sample]:
    return sorted(samples, key=lambda s: (s.valid_tokens, s.sample_id))


def interleave_slice(sorted_samples: Sequence[Sample], worker: int, num_workers: int) -> list[Sample]:
    if num_workers < 1 or not 0 <= worker < num_workers:
        raise SlicingError(f"worker {worker} is not in [0, {num_workers})")
    if len(sorted_samples) % num_workers:
        raise SlicingError(f"{len(sorted_samples)} samples cannot be split evenly over {num_workers} workers")
    return list(sorted_samples[worker::num_workers])


@dataclass(frozen=True)
class ExchangePlan:
    assignment: tuple[tuple[int, ...], ...]  # per worker, global sample ids in slice order
    sorted_order: tuple[int, ...]

    def as_dict(self) -> dict:
        return {"assignment": [list(a) for a in self.assignment], "sorted_order": list(self.sorted_order)}


@dataclass(frozen=True)
class BalanceMetrics:
    tokens_before: tuple[int, ...]
    tokens_after: tuple[int, ...]
    spread_before: int
    spread_after: int
    imbalance_before: float
    imbalance_after: float

    def as_dict(self) -> dict:
        return {
            "tokens_before": list(self.tokens_before),
            "tokens_after": list(self.tokens_after),
            "spread_before": self.spread_before,
            "spread_after": self.spread_after,
            "imbalance_before": self.imbalance_before,
            "imbalance_after": self.imbalance_after,
        }


def _imbalance(sums: Sequence[int]) -> float:
    mean = sum(sums) / len(sums)
    return max(sums) / mean if mean > 0 else 1.0


def balance_metrics(plan: ExchangePlan, shards: Sequence[WorkerShard]) -> BalanceMetrics:
    ordered = _check_shards(shards)
    tokens = {s.sample_id: s.valid_tokens for shard in ordered for s in shard.samples}
    before = tuple(shard.tokens for shard in ordered)
    after = tuple(sum(tokens[i] for i in ids) for ids in plan.assignment)
    return BalanceMetrics(
        before,
        after,
        max(before) - min(before),
        max(after) - min(after),
        _imbalance(before),
        _imbalance(after),
    )


def exchange_padding(shards: Sequence[WorkerShard]) -> tuple[ExchangePlan, BalanceMetrics]:
    gathered = all_gather(shards)
    ordered = sort_by_valid_tokens(gathered)
    w = len(shards)
    plan = ExchangePlan(
        tuple(tuple(s.sample_id for s in interleave_slice(ordered, i, w)) for i in range(w)),
        tuple(s.sample_id for s in ordered),
    )
    return plan, balance_metrics(plan, shards)


def apply_plan(plan: ExchangePlan, shards: Sequence[WorkerShard]) -> list[WorkerShard]:
    """Materialize the post-exchange shards (payloads travel with their samples)."""
    by_id = {s.sample_id: s for shard in shards for s in shard.samples}
    return [WorkerShard(w, tuple(by_id[i] for i in ids)) for w, ids in enumerate(plan.assignment)]
