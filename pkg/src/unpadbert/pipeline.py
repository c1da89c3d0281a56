"""Discrete-event model of a data-parallel training step pipeline.

Each worker has three lanes (``CPU``, ``H2D``, ``GPU_compute``) and all
workers share a ``COMM`` lane for the gradient all-reduce. A step is
exchange -> host-to-device copy -> forward/backward -> all-reduce, with an
optional device-to-host sync every ``sync_every_n`` steps.

Serial mode starts the exchange of step ``n`` only after step ``n - 1`` has
fully finished. Overlapped mode prefetches with double buffering: exchange
``n`` may start once every worker has copied batch ``n - 1`` to the device,
and copy ``n`` may start once the device buffer used by batch ``n - 2`` is
free. Times are exact ``Fraction`` values so event ordering never depends on
float rounding.
"""
from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path
from typing import Sequence

from .balance import exchange_padding, shards_from_lengths
from .errors import BoundNotApplicableError, InvalidInputError

LANES = ("CPU", "H2D", "GPU_compute", "COMM")
_LANE_RANK = {name: i for i, name in enumerate(LANES)}


def exact(x) -> Fraction:
    """Convert a number to an exact fraction; floats are read by their decimal repr."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, bool):
        raise InvalidInputError("booleans are not durations")
    if isinstance(x, int):
        return Fraction(x)
    if isinstance(x, float):
        return Fraction(repr(x))
    if isinstance(x, str):
        return Fraction(x)
    raise InvalidInputError(f"not a number: {x!r}")


def plain(x: Fraction):
    """JSON-friendly form: int when integral, else float."""
    return int(x) if x.denominator == 1 else float(x)


@dataclass(frozen=True)
class StepLoad:
    """One training step: per-worker valid tokens and the gathered sample count."""

    worker_tokens: tuple[int, ...]
    num_samples: int

    @classmethod
    def from_samples(cls, lengths_per_worker: Sequence[Sequence[int]]) -> "StepLoad":
        return cls(
            tuple(sum(int(n) for n in ws) for ws in lengths_per_worker),
            sum(len(ws) for ws in lengths_per_worker),
        )


@dataclass(frozen=True)
class StageSpec:
    """Duration coefficients in abstract time units.

    exchange = exchange_fixed + exchange_per_sample * gathered samples
    h2d      = h2d_fixed + h2d_per_token * worker tokens
    gpu_step = gpu_fixed + gpu_per_token * worker tokens
    """

    exchange_fixed: Fraction = Fraction(0)
    exchange_per_sample: Fraction = Fraction(1)
    h2d_fixed: Fraction = Fraction(0)
    h2d_per_token: Fraction = Fraction(1)
    gpu_fixed: Fraction = Fraction(0)
    gpu_per_token: Fraction = Fraction(1)
    allreduce_time: Fraction = Fraction(0)
    d2h_sync_cost: Fraction = Fraction(0)
    sync_every_n: int = 1

    def __post_init__(self):
        for f in fields(self):
            if f.name == "sync_every_n":
                continue
            v = exact(getattr(self, f.name))
            if v < 0:
                raise InvalidInputError(f"{f.name} must be >= 0")
            object.__setattr__(self, f.name, v)
        if not isinstance(self.sync_every_n, int) or self.sync_every_n < 1:
            raise InvalidInputError("sync_every_n must be an integer >= 1")

    @classmethod
    def from_dict(cls, costs: dict, sync_every_n: int = 1) -> "StageSpec":
        known = {f.name for f in fields(cls)} - {"sync_every_n"}
        unknown = set(costs) - known
        if unknown:
            raise InvalidInputError(f"unknown cost keys: {sorted(unknown)}")
        return cls(**costs, sync_every_n=sync_every_n)

    def exchange_time(self, step: StepLoad) -> Fraction:
        return self.exchange_fixed + self.exchange_per_sample * step.num_samples

    def h2d_time(self, step: StepLoad, worker: int) -> Fraction:
        return self.h2d_fixed + self.h2d_per_token * step.worker_tokens[worker]

    def gpu_step_time(self, step: StepLoad, worker: int) -> Fraction:
        return self.gpu_fixed + self.gpu_per_token * step.worker_tokens[worker]

    def sync_due(self, batch_index: int) -> bool:
        return (batch_index + 1) % self.sync_every_n == 0

    def as_dict(self) -> dict:
        out = {f.name: plain(getattr(self, f.name)) for f in fields(self) if f.name != "sync_every_n"}
        out["sync_every_n"] = self.sync_every_n
        return out


@dataclass(frozen=True)
class Event:
    lane: str
    worker: int | None
    label: str
    batch_index: int
    start: Fraction
    end: Fraction

    def as_dict(self) -> dict:
        return {
            "lane": self.lane,
            "worker": self.worker,
            "label": self.label,
            "batch_index": self.batch_index,
            "start": plain(self.start),
            "end": plain(self.end),
        }


@dataclass(frozen=True)
class Timeline:
    mode: str
    events: tuple[Event, ...]
    batches: tuple[StepLoad, ...] = field(repr=False)
    spec: StageSpec = field(repr=False)
    workers: int = 1

    @property
    def makespan(self) -> Fraction:
        return max((e.end for e in self.events), default=Fraction(0))

    def find(self, label: str, batch_index: int, worker: int | None = None) -> Event:
        for e in self.events:
            if e.label == label and e.batch_index == batch_index and e.worker == worker:
                return e
        raise KeyError((label, batch_index, worker))

    def lane_busy(self) -> dict:
        busy: dict = {}
        for e in self.events:
            key = e.lane if e.worker is None else f"{e.lane}[{e.worker}]"
            busy[key] = busy.get(key, Fraction(0)) + (e.end - e.start)
        return dict(sorted(busy.items()))

    def utilization(self) -> dict:
        span = self.makespan
        return {k: float(v / span) if span else 0.0 for k, v in self.lane_busy().items()}

    def allreduce_wait(self) -> list[Fraction]:
        """Per step, total time workers sit finished but waiting for the all-reduce to begin."""
        waits = []
        for b in range(len(self.batches)):
            ar = self.find("allreduce", b)
            waits.append(sum((ar.start - self.find("gpu_step", b, w).end for w in range(self.workers)), Fraction(0)))
        return waits

    def to_csv(self) -> str:
        rows = ["lane,worker,label,batch_index,start,end"]
        for e in self.events:
            w = "" if e.worker is None else e.worker
            rows.append(f"{e.lane},{w},{e.label},{e.batch_index},{plain(e.start)},{plain(e.end)}")
        return "\n".join(rows) + "\n"


# -- event engine ------------------------------------------------------------


@dataclass
class _Task:
    key: tuple
    lane: str
    worker: int | None
    label: str
    batch_index: int
    duration: Fraction
    deps: list = field(default_factory=list)


def _run(tasks: list[_Task]) -> list[Event]:
    """Event-driven execution: a task starts when its deps finish and its lane is idle.

    Lanes pick among waiting tasks by (batch_index, worker, insertion order);
    events finishing at the same instant are processed in (lane, batch_index)
    order before any dispatch at that instant.
    """
    by_key = {t.key: t for t in tasks}
    pending = {t.key: len(t.deps) for t in tasks}
    children: dict = {t.key: [] for t in tasks}
    for t in tasks:
        for d in t.deps:
            if d not in by_key:
                raise InvalidInputError(f"unknown dependency {d} of {t.key}")
            children[d].append(t.key)
    order = {t.key: i for i, t in enumerate(tasks)}

    waiting: dict = {}
    def enqueue(key):
        t = by_key[key]
        lane = (t.lane, t.worker)
        heapq.heappush(waiting.setdefault(lane, []), (t.batch_index, -1 if t.worker is None else t.worker, order[key], key))

    for t in tasks:
        if not t.deps:
            enqueue(t.key)

    busy: set = set()
    finishing: list = []
    events: dict = {}
    now = Fraction(0)
    while True:
        for lane in sorted(waiting, key=lambda l: (_LANE_RANK[l[0]], -1 if l[1] is None else l[1])):
            if lane in busy or not waiting[lane]:
                continue
            *_, key = heapq.heappop(waiting[lane])
            t = by_key[key]
            busy.add(lane)
            events[key] = Event(t.lane, t.worker, t.label, t.batch_index, now, now + t.duration)
            heapq.heappush(finishing, (now + t.duration, _LANE_RANK[t.lane], t.batch_index, order[key], key))
        if not finishing:
            break
        now = finishing[0][0]
        while finishing and finishing[0][0] == now:
            *_, key = heapq.heappop(finishing)
            t = by_key[key]
            busy.discard((t.lane, t.worker))
            for c in children[key]:
                pending[c] -= 1
                if pending[c] == 0:
                    enqueue(c)
    if len(events) != len(tasks):
        raise InvalidInputError("dependency cycle: some tasks never became ready")
    return sorted(events.values(), key=lambda e: (e.start, _LANE_RANK[e.lane], e.batch_index, -1 if e.worker is None else e.worker))


def _build_tasks(batches: Sequence[StepLoad], spec: StageSpec, workers: int, overlapped: bool) -> list[_Task]:
    tasks = []
    W = range(workers)
    for n, step in enumerate(batches):
        gate_prev = []  # everything that closes step n-1
        if n > 0:
            gate_prev = [("allreduce", n - 1)] + [("d2h_sync", n - 1, w) for w in W if spec.sync_due(n - 1)]
        ex = spec.exchange_time(step)
        for w in W:
            deps = []
            if n > 0:
                deps.append(("exchange", n - 1, w))
                if overlapped:
                    deps += [("h2d", n - 1, v) for v in W]
                else:
                    deps += gate_prev
            tasks.append(_Task(("exchange", n, w), "CPU", w, "exchange", n, ex, deps))
        for w in W:
            deps = [("exchange", n, v) for v in W]
            if n > 0:
                deps.append(("h2d", n - 1, w))
            if overlapped and n > 1:
                deps.append(("gpu_step", n - 2, w))
            tasks.append(_Task(("h2d", n, w), "H2D", w, "h2d", n, spec.h2d_time(step, w), deps))
        for w in W:
            deps = [("h2d", n, w)]
            if n > 0:
                deps.append(("allreduce", n - 1))
                if spec.sync_due(n - 1):
                    deps.append(("d2h_sync", n - 1, w))
            tasks.append(_Task(("gpu_step", n, w), "GPU_compute", w, "gpu_step", n, spec.gpu_step_time(step, w), deps))
        tasks.append(_Task(("allreduce", n), "COMM", None, "allreduce", n, spec.allreduce_time, [("gpu_step", n, w) for w in W]))
        if spec.sync_due(n):
            for w in W:
                tasks.append(_Task(("d2h_sync", n, w), "GPU_compute", w, "d2h_sync", n, spec.d2h_sync_cost, [("allreduce", n)]))
    return tasks


def _check(batches, workers):
    batches = tuple(batches)
    if not batches:
        raise InvalidInputError("at least one batch is required")
    if workers < 1:
        raise InvalidInputError("workers must be >= 1")
    for i, b in enumerate(batches):
        if len(b.worker_tokens) != workers:
            raise InvalidInputError(f"batch {i} has {len(b.worker_tokens)} worker loads, expected {workers}")
    return batches


def simulate_serial(batches: Sequence[StepLoad], spec: StageSpec, workers: int = 1) -> Timeline:
    batches = _check(batches, workers)
    events = _run(_build_tasks(batches, spec, workers, overlapped=False))
    return Timeline("serial", tuple(events), batches, spec, workers)


def simulate_overlapped(batches: Sequence[StepLoad], spec: StageSpec, workers: int = 1) -> Timeline:
    batches = _check(batches, workers)
    events = _run(_build_tasks(batches, spec, workers, overlapped=True))
    return Timeline("overlapped", tuple(events), batches, spec, workers)


def apply_sync_policy(timeline: Timeline, sync_every_n: int) -> Timeline:
    """Re-run the timeline's scenario charging the D2H sync once every ``sync_every_n`` steps."""
    spec = replace(timeline.spec, sync_every_n=sync_every_n)
    sim = simulate_serial if timeline.mode == "serial" else simulate_overlapped
    return sim(timeline.batches, spec, timeline.workers)


def steady_state_bound(batches: Sequence[StepLoad], spec: StageSpec, workers: int = 1) -> Fraction:
    """Overlapped makespan when every prefetch finishes before the GPU needs it.

    For one worker this is exchange(0) + h2d(0) + sum of gpu steps (plus any
    all-reduce and sync charges). Raises :class:`BoundNotApplicableError` when
    some step's exchange + copy does not fit behind the previous GPU step.
    """
    batches = _check(batches, workers)
    W = range(workers)
    gpu = [[spec.gpu_step_time(b, w) for w in W] for b in batches]
    h2d = [[spec.h2d_time(b, w) for w in W] for b in batches]
    ex = [spec.exchange_time(b) for b in batches]
    for n in range(1, len(batches)):
        if n == 1:
            slack = max(h + g for h, g in zip(h2d[0], gpu[0])) - max(h2d[0])
        else:
            slack = max(gpu[n - 1])
        if ex[n] + max(h2d[n]) > slack:
            raise BoundNotApplicableError(
                f"step {n}: exchange + copy = {plain(ex[n] + max(h2d[n]))} exceeds the hiding window {plain(slack)}"
            )
    total = ex[0] + max(h + g for h, g in zip(h2d[0], gpu[0]))
    total += sum((max(g) for g in gpu[1:]), Fraction(0))
    total += spec.allreduce_time * len(batches)
    total += spec.d2h_sync_cost * sum(1 for n in range(len(batches)) if spec.sync_due(n))
    return total


# -- reports -----------------------------------------------------------------


@dataclass(frozen=True)
class SimReport:
    makespan_serial: Fraction
    makespan_overlapped: Fraction
    speedup: float
    utilization: dict
    allreduce_wait: list
    allreduce_wait_balanced: list | None = None

    def as_dict(self) -> dict:
        out = {
            "makespan_serial": plain(self.makespan_serial),
            "makespan_overlapped": plain(self.makespan_overlapped),
            "speedup": self.speedup,
            "utilization": self.utilization,
            "allreduce_wait_per_step": [plain(w) for w in self.allreduce_wait],
            "allreduce_wait_total": plain(sum(self.allreduce_wait, Fraction(0))),
        }
        if self.allreduce_wait_balanced is not None:
            out["allreduce_wait_per_step_balanced"] = [plain(w) for w in self.allreduce_wait_balanced]
            out["allreduce_wait_total_balanced"] = plain(sum(self.allreduce_wait_balanced, Fraction(0)))
        return out


def simulate(batches: Sequence[StepLoad], spec: StageSpec, workers: int = 1,
             balanced: Sequence[StepLoad] | None = None) -> tuple[SimReport, Timeline, Timeline]:
    serial = simulate_serial(batches, spec, workers)
    over = simulate_overlapped(batches, spec, workers)
    ms, mo = serial.makespan, over.makespan
    bal = simulate_overlapped(balanced, spec, workers).allreduce_wait() if balanced is not None else None
    report = SimReport(ms, mo, float(ms / mo) if mo else 1.0, over.utilization(), over.allreduce_wait(), bal)
    return report, serial, over


def balanced_steps(steps_samples: Sequence[Sequence[Sequence[int]]]) -> tuple[list[StepLoad], list[StepLoad]]:
    """Per step, the load before and after the padding exchange of that step's samples."""
    before, after = [], []
    for per_worker in steps_samples:
        before.append(StepLoad.from_samples(per_worker))
        _, metrics = exchange_padding(shards_from_lengths(per_worker))
        after.append(StepLoad(metrics.tokens_after, before[-1].num_samples))
    return before, after


@dataclass(frozen=True)
class Scenario:
    workers: int
    batches: tuple[StepLoad, ...]
    spec: StageSpec
    samples: tuple | None = None  # per step, per worker sample lengths when given

    @classmethod
    def from_dict(cls, doc: dict) -> "Scenario":
        unknown = set(doc) - {"workers", "batches", "costs", "sync_every_n"}
        if unknown:
            raise InvalidInputError(f"unknown scenario keys: {sorted(unknown)}")
        workers = int(doc.get("workers", 1))
        spec = StageSpec.from_dict(doc.get("costs", {}), int(doc.get("sync_every_n", 1)))
        raw = doc.get("batches")
        if not raw:
            raise InvalidInputError("scenario needs a non-empty 'batches' list")
        batches, samples = [], []
        all_samples = True
        for i, entry in enumerate(raw):
            if isinstance(entry, (int, float)) and workers == 1:
                entry = [entry]
            if not isinstance(entry, list) or len(entry) != workers:
                raise InvalidInputError(f"batch {i} must list one load per worker ({workers})")
            if all(isinstance(x, list) for x in entry):
                batches.append(StepLoad.from_samples(entry))
                samples.append(tuple(tuple(int(n) for n in x) for x in entry))
            elif all(isinstance(x, int) and not isinstance(x, bool) for x in entry):
                batches.append(StepLoad(tuple(entry), workers))
                all_samples = False
            else:
                raise InvalidInputError(f"batch {i} mixes token sums and sample lists")
        return cls(workers, tuple(batches), spec, tuple(samples) if all_samples else None)

    @classmethod
    def read(cls, path) -> "Scenario":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
