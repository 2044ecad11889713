"""Deterministic event-driven simulator core.

Holds the heterogeneous worker timing model (per-worker compute coefficient K,
multiplicative lognormal jitter, per-round drift), the byte-level
communication-cost model, the tie-stable event queue, and the API-call ledger
that every strategy driver reports into.
"""
from __future__ import annotations

import heapq
import json
import math
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Callable, Iterable

import numpy as np

from .errors import ConfigurationError, SimulationError

API_KINDS = ("req_dataset", "push_gradients", "req_global_model", "send_loss", "control")


@dataclass
class WorkerProfile:
    """Timing identity of one worker.

    K is seconds per mini-batch step (loss + gradient); jitter_cv is the
    coefficient of variation of a unit-mean lognormal noise multiplier;
    drift_per_round compounds K after every sampled round, modelling hardware
    slow-down; mem_capacity caps the samples a worker may hold.
    """

    worker_id: int
    K: float
    jitter_cv: float = 0.0
    drift_per_round: float = 0.0
    mem_capacity: int = 1 << 30
    family: str = ""

    def __post_init__(self):
        if self.K <= 0:
            raise ConfigurationError(f"worker {self.worker_id}: K must be > 0")
        if not 0.0 <= self.jitter_cv < 1.0:
            raise ConfigurationError(f"worker {self.worker_id}: jitter_cv must be in [0, 1)")
        if self.mem_capacity < 1:
            raise ConfigurationError(f"worker {self.worker_id}: mem_capacity must be >= 1")


@dataclass(frozen=True)
class CommModel:
    """Fixed-latency, fixed-bandwidth link; payloads priced per byte."""

    latency_s: float = 0.005
    bandwidth_Bps: float = 10e6
    bytes_per_scalar: int = 4  # 2 when the half-precision payload toggle is on
    sample_bytes: int = 3137

    def __post_init__(self):
        if self.latency_s < 0 or self.bandwidth_Bps <= 0 or self.sample_bytes <= 0:
            raise ConfigurationError("comm model fields must be positive")
        if self.bytes_per_scalar not in (2, 4):
            raise ConfigurationError("bytes_per_scalar must be 2 or 4")

    def model_bytes(self, n_params: int) -> int:
        return n_params * self.bytes_per_scalar

    def data_bytes(self, n_samples: int) -> int:
        return n_samples * self.sample_bytes


class EventKind(IntEnum):
    # declaration order doubles as the tie-break order inside the queue
    TRAIN_DONE = 0
    PUSH_ARRIVE_PS = 1
    MODEL_ARRIVE_WORKER = 2
    DATA_ARRIVE_WORKER = 3
    EVAL_DONE = 4


@dataclass
class SimEvent:
    time_s: float
    worker_id: int
    kind: EventKind
    seq: int = -1
    bytes: int = 0
    messages: tuple[str, ...] = ()
    payload: dict | None = None


class EventQueue:
    """Priority queue processing events in (time, worker_id, kind, seq) order."""

    def __init__(self):
        self._heap: list = []
        self._seq = 0
        self.now = 0.0

    def __len__(self) -> int:
        return len(self._heap)

    def schedule(self, event: SimEvent) -> SimEvent:
        if event.time_s < self.now:
            raise SimulationError(
                f"event at t={event.time_s} scheduled in the past (now={self.now})"
            )
        event.seq = self._seq
        self._seq += 1
        heapq.heappush(
            self._heap, (event.time_s, event.worker_id, int(event.kind), event.seq, event)
        )
        return event

    def pop(self) -> SimEvent:
        ev = heapq.heappop(self._heap)[-1]
        self.now = ev.time_s
        return ev


def run_events(
    initial_events: Iterable[SimEvent],
    handler: Callable[[SimEvent, EventQueue], None],
    stop: Callable[[], bool] | None = None,
) -> list[SimEvent]:
    """Drain the queue deterministically; handlers may only schedule forward.

    Returns the processed trace in order. ``stop`` is polled after each event.
    """
    queue = EventQueue()
    for ev in initial_events:
        queue.schedule(ev)
    trace: list[SimEvent] = []
    while queue:
        ev = queue.pop()
        trace.append(ev)
        handler(ev, queue)
        if stop is not None and stop():
            break
    return trace


class ApiCallLedger:
    """Per-worker counters for each PS message kind, fed from trace events."""

    def __init__(self):
        self._counts: dict[int, Counter] = {}

    def record(self, worker_id: int, kind: str, n: int = 1) -> None:
        if kind not in API_KINDS:
            raise SimulationError(f"unknown API call kind {kind!r}")
        self._counts.setdefault(worker_id, Counter())[kind] += n

    def record_event(self, event: SimEvent) -> None:
        for kind in event.messages:
            self.record(event.worker_id, kind)

    def total(self, kind: str | None = None) -> int:
        if kind is None:
            return sum(sum(c.values()) for c in self._counts.values())
        return sum(c[kind] for c in self._counts.values())

    def per_worker(self) -> dict[int, dict[str, int]]:
        return {
            w: {k: self._counts[w].get(k, 0) for k in API_KINDS}
            for w in sorted(self._counts)
        }

    def to_csv(self, path) -> None:
        tmp = f"{path}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write("worker," + ",".join(API_KINDS) + ",total\n")
            for w, kinds in self.per_worker().items():
                row = [str(kinds[k]) for k in API_KINDS]
                fh.write(f"{w}," + ",".join(row) + f",{sum(kinds.values())}\n")
        os.replace(tmp, path)


def predict_train_time(profile: WorkerProfile, E: int, dss: int, mbs: int) -> float:
    """Round-duration model: K * E * ceil(dss / mbs).

    A trailing partial mini-batch still costs a full gradient step, hence the
    ceiling.
    """
    if dss < 1 or mbs < 1 or E < 1:
        raise ConfigurationError("E, dss and mbs must all be >= 1")
    return profile.K * E * math.ceil(dss / mbs)


def sample_train_time(
    profile: WorkerProfile, E: int, dss: int, mbs: int, rng
) -> float:
    """One noisy round duration; afterwards K compounds by (1 + drift_per_round).

    ``rng`` is an integer seed or a numpy Generator. With jitter_cv == 0 the
    returned value equals predict_train_time exactly and no randomness is
    consumed.
    """
    base = predict_train_time(profile, E, dss, mbs)
    if profile.jitter_cv > 0.0:
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        sigma = math.sqrt(math.log(1.0 + profile.jitter_cv**2))
        base *= math.exp(rng.normal(-0.5 * sigma * sigma, sigma))
    profile.K *= 1.0 + profile.drift_per_round
    return base


def comm_delay(model: CommModel, n_bytes: int) -> float:
    """Transfer time for one message: fixed latency plus bytes / bandwidth."""
    if n_bytes < 0:
        raise ConfigurationError("n_bytes must be >= 0")
    return model.latency_s + n_bytes / model.bandwidth_Bps


def export_trace_jsonl(trace: Iterable[SimEvent], path, run_label: str | None = None) -> None:
    """One event per line: time, worker, kind, bytes (plus optional run label)."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for line in iter_trace_lines(trace, run_label):
            fh.write(line + "\n")
    os.replace(tmp, path)


def iter_trace_lines(trace: Iterable[SimEvent], run_label: str | None = None):
    for ev in trace:
        rec = {"time": ev.time_s, "worker": ev.worker_id, "kind": ev.kind.name.lower(), "bytes": ev.bytes}
        if run_label is not None:
            rec = {"run": run_label, **rec}
        yield json.dumps(rec)


@dataclass
class Cluster:
    workers: list[WorkerProfile]
    comm: CommModel

    def copy_workers(self) -> dict[int, WorkerProfile]:
        """Fresh mutable profile copies, keyed by id (K drifts during a run)."""
        return {p.worker_id: replace(p) for p in self.workers}


# The "table4" preset: five worker families with compute ratios 4:2:2:2:1
# (higher K = slower) and memory caps proportional to 2/4/7/16/8 GB of RAM.
_TABLE4_FAMILIES = (
    ("b1ms", 2, 4.0, 2),
    ("f2s", 3, 2.0, 4),
    ("ds2", 3, 2.0, 7),
    ("e2ds", 2, 2.0, 16),
    ("f4s", 2, 1.0, 8),
)


def table4_cluster(
    k_unit: float = 0.005,
    jitter_cv: float = 0.05,
    drift_per_round: float = 0.0,
    mem_samples_per_gb: int = 400,
    comm: CommModel | None = None,
) -> Cluster:
    """12 heterogeneous workers: two slow 1-vCPU-class nodes through two fast ones."""
    workers = []
    wid = 0
    for family, count, ratio, ram_gb in _TABLE4_FAMILIES:
        for _ in range(count):
            workers.append(
                WorkerProfile(
                    worker_id=wid,
                    K=k_unit * ratio,
                    jitter_cv=jitter_cv,
                    drift_per_round=drift_per_round,
                    mem_capacity=ram_gb * mem_samples_per_gb,
                    family=family,
                )
            )
            wid += 1
    return Cluster(workers=workers, comm=comm or CommModel())


CLUSTER_PRESETS = {"table4": table4_cluster}
