"""Length-bucketed attention grouping and multi-lane schedule estimation.

Sequences are grouped into ``(lower, upper]`` buckets; each group would run
one attention kernel sized for the bucket upper. Groups have no data
dependencies on each other, so they are spread over concurrent lanes between
an entry barrier and an exit barrier.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import CoverageError, InvalidInputError


@dataclass(frozen=True, order=True)
class LengthBucket:
    lower: int
    upper: int
    kernel_id: str = ""

    def __post_init__(self):
        if not 0 <= self.lower < self.upper:
            raise InvalidInputError(f"bucket needs 0 <= lower < upper, got ({self.lower}, {self.upper}]")
        if not self.kernel_id:
            object.__setattr__(self, "kernel_id", f"fmha_{self.upper}")

    def contains(self, length: int) -> bool:
        return self.lower < length <= self.upper


def make_bucket_set(bounds) -> tuple[LengthBucket, ...]:
    """Build a bucket set from ``(lower, upper)`` pairs and check it is disjoint and gap-free."""
    buckets = tuple(sorted(LengthBucket(int(lo), int(hi)) for lo, hi in bounds))
    if not buckets:
        raise InvalidInputError("bucket set is empty")
    if buckets[0].lower != 0:
        raise CoverageError(f"bucket set must start at 0, starts at {buckets[0].lower}")
    for a, b in zip(buckets, buckets[1:]):
        if b.lower != a.upper:
            raise CoverageError(f"buckets ({a.lower},{a.upper}] and ({b.lower},{b.upper}] overlap or leave a gap")
    return buckets


DEFAULT_BUCKETS = make_bucket_set([(0, 128), (128, 256), (256, 384), (384, 512)])


def read_bucket_set(path) -> tuple[LengthBucket, ...]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        return make_bucket_set([(b["lower"], b["upper"]) for b in doc])
    except (TypeError, KeyError) as exc:
        raise InvalidInputError(f"bucket entries need 'lower' and 'upper': {exc}") from None


@dataclass(frozen=True)
class GroupPlan:
    groups: dict  # LengthBucket -> list of sequence indices, buckets ascending
    lengths: tuple[int, ...]

    def bucket_index(self, bucket: LengthBucket) -> int:
        return list(self.groups).index(bucket)


def group_sequences(lengths, bucket_set=DEFAULT_BUCKETS) -> GroupPlan:
    lengths = tuple(int(x) for x in lengths)
    buckets = sorted(bucket_set)
    groups: dict = {}
    for i, n in enumerate(lengths):
        for b in buckets:
            if b.contains(n):
                groups.setdefault(b, []).append(i)
                break
        else:
            raise CoverageError(f"sequence {i} of length {n} falls outside every bucket")
    return GroupPlan({b: groups[b] for b in buckets if b in groups}, lengths)


def baseline_plan(lengths, bucket_set=DEFAULT_BUCKETS) -> GroupPlan:
    """Every sequence in one group served by the kernel for the batch maximum."""
    lengths = tuple(int(x) for x in lengths)
    if not lengths:
        return GroupPlan({}, lengths)
    top = group_sequences([max(lengths)], bucket_set)
    (bucket,) = top.groups
    return GroupPlan({bucket: list(range(len(lengths)))}, lengths)


@dataclass(frozen=True)
class FmhaCostModel:
    """Abstract per-group cost ``count*upper^2*c_quadratic + count*upper*c_linear + c_launch``.

    ``lane_capacity`` caps how many lanes' worth of work the device sustains at
    once; ``barrier_cost`` is charged at entry and exit in both serial and
    multi-lane execution.
    """

    c_quadratic: float = 1.0
    c_linear: float = 0.0
    c_launch: float = 0.0
    lane_capacity: float = math.inf
    barrier_cost: float = 0.0

    def __post_init__(self):
        for name in ("c_quadratic", "c_linear", "c_launch", "barrier_cost"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be >= 0")
        if not self.lane_capacity >= 1:
            raise InvalidInputError("lane_capacity must be >= 1")

    def cost(self, bucket: LengthBucket, count: int) -> float:
        u = bucket.upper
        return count * u * u * self.c_quadratic + count * u * self.c_linear + self.c_launch


@dataclass(frozen=True)
class StreamTask:
    bucket: LengthBucket
    lane: int
    cost: float
    start: float
    end: float
    sequences: tuple[int, ...]
    start_dep: str = "entry_barrier"
    end_dep: str = "exit_barrier"


@dataclass(frozen=True)
class StreamSchedule:
    lanes: int
    tasks: tuple[StreamTask, ...]
    entry_barrier: float = 0.0
    exit_barrier: float = 0.0
    cost_model: FmhaCostModel = field(default_factory=FmhaCostModel)

    def lane_loads(self) -> list[float]:
        loads = [0.0] * self.lanes
        for t in self.tasks:
            loads[t.lane] += t.cost
        return loads

    def timeline(self) -> list[dict]:
        rows = [{"lane": None, "label": "entry_barrier", "start": 0.0, "end": self.entry_barrier}]
        for t in sorted(self.tasks, key=lambda t: (t.lane, t.start)):
            rows.append({
                "lane": t.lane,
                "label": t.bucket.kernel_id,
                "bucket": [t.bucket.lower, t.bucket.upper],
                "count": len(t.sequences),
                "start": t.start,
                "end": t.end,
            })
        end = max([t.end for t in self.tasks], default=self.entry_barrier)
        rows.append({"lane": None, "label": "exit_barrier", "start": end, "end": self.exit_barrier})
        return rows


def build_stream_schedule(plan: GroupPlan, lanes: int, cost_model: FmhaCostModel | None = None) -> StreamSchedule:
    """Longest-processing-time-first assignment of groups to lanes.

    Groups are taken in descending cost (ties: bucket upper ascending, then
    bucket index) and each goes to the currently least-loaded lane (ties:
    lowest lane index). Every task starts after the entry barrier; the exit
    barrier waits for the last task.
    """
    if lanes < 1:
        raise InvalidInputError("lanes must be >= 1")
    cm = cost_model or FmhaCostModel()
    order = sorted(
        enumerate(plan.groups.items()),
        key=lambda item: (-cm.cost(item[1][0], len(item[1][1])), item[1][0].upper, item[0]),
    )
    entry = cm.barrier_cost
    loads = [0.0] * lanes
    tasks = []
    for _, (bucket, members) in order:
        lane = min(range(lanes), key=lambda i: (loads[i], i))
        c = cm.cost(bucket, len(members))
        start = entry + loads[lane]
        tasks.append(StreamTask(bucket, lane, c, start, start + c, tuple(members)))
        loads[lane] += c
    exit_time = entry + max(loads) + cm.barrier_cost if tasks else 0.0
    return StreamSchedule(lanes, tuple(tasks), entry if tasks else 0.0, exit_time, cm)


@dataclass(frozen=True)
class TimeEstimate:
    serial_time: float
    multi_lane_time: float
    speedup: float

    def as_dict(self) -> dict:
        return {"serial_time": self.serial_time, "multi_lane_time": self.multi_lane_time, "speedup": self.speedup}


def estimate_time(schedule: StreamSchedule, cost_model: FmhaCostModel | None = None) -> TimeEstimate:
    cm = cost_model or schedule.cost_model
    if not schedule.tasks:
        return TimeEstimate(0.0, 0.0, 1.0)
    costs = [cm.cost(t.bucket, len(t.sequences)) for t in schedule.tasks]
    loads = [0.0] * schedule.lanes
    for t, c in zip(schedule.tasks, costs):
        loads[t.lane] += c
    # plain left-to-right sums: a lane's partial sums never exceed the total's
    work = sum(costs)
    barriers = 2 * cm.barrier_cost
    serial = work + barriers
    # the device cannot drain work faster than lane_capacity lanes' worth
    multi = max(max(loads), work / cm.lane_capacity) + barriers
    speedup = serial / multi if multi > 0 else 1.0
    return TimeEstimate(serial, multi, speedup)


def plan_cost(plan: GroupPlan, cost_model: FmhaCostModel | None = None) -> float:
    cm = cost_model or FmhaCostModel()
    return math.fsum(cm.cost(b, len(m)) for b, m in plan.groups.items())
