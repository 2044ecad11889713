"""Straggler detection and per-worker (DSS, MBS) sizing.

Workers whose observed round times fall outside the Tukey fences
[Q1 - 1.5*IQR, Q3 + 1.5*IQR] are re-planned: their compute coefficient K is
re-estimated from the most recent round, then a dual binary search picks the
dataset size and mini-batch size whose predicted round time is closest to the
cluster median. Both too-slow and too-fast workers are rebalanced, so spare
compute is put to work instead of idling.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, MutableMapping, Sequence

import numpy as np

from .errors import ConfigurationError, InsufficientDataError
from .simcore import CommModel, WorkerProfile, comm_delay, predict_train_time

MBS_DOMAIN = (2, 4, 8, 16, 32, 64, 128, 256)


@dataclass
class AllocationPlan:
    worker_id: int
    dss: int
    mbs: int
    predicted_time_s: float
    target_time_s: float
    reallocated: bool = False
    straggler_warning: bool = False

    def __post_init__(self):
        if self.mbs not in MBS_DOMAIN:
            raise ConfigurationError(f"mbs {self.mbs} not in {MBS_DOMAIN}")
        if self.dss < 1:
            raise ConfigurationError("dss must be >= 1")


@dataclass(frozen=True)
class TimingSample:
    worker_id: int
    observed_time_s: float
    dss: int
    mbs: int
    E: int = 1

    def __post_init__(self):
        if self.observed_time_s <= 0 or self.dss < 1 or self.mbs < 1 or self.E < 1:
            raise ConfigurationError("timing sample fields must be positive")


def iqr_outliers(times: Sequence[float]) -> set[int]:
    """Indices outside the 1.5*IQR fences; quartiles by linear interpolation."""
    if len(times) < 4:
        raise InsufficientDataError(f"need >= 4 samples for fences, got {len(times)}")
    arr = np.asarray(times, dtype=np.float64)
    q1, q3 = np.quantile(arr, [0.25, 0.75])
    iqr = q3 - q1
    lo, hi = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    return {i for i, t in enumerate(arr) if t < lo or t > hi}


def estimate_k(sample: TimingSample) -> float:
    """Invert the round-time model: K = t / (E * ceil(dss / mbs))."""
    return sample.observed_time_s / (sample.E * math.ceil(sample.dss / sample.mbs))


def _best_dss_for_mbs(K: float, E: int, t_target: float, mbs: int, limit: int):
    """Best dss in [1, limit] for a fixed mbs, via binary search on the step count.

    Predicted time is a staircase in dss (jumps of K*E at multiples of mbs), so
    we search for the largest dss whose prediction does not exceed the target
    and compare it against the first dss of the next staircase step. Ties
    prefer the larger dss, and the winner is snapped to the top of its step
    (maximum data for the same predicted time).
    """
    step_cost = K * E

    def predict(dss: int) -> float:
        return step_cost * math.ceil(dss / mbs)

    if predict(1) > t_target:
        best = 1
    elif predict(limit) <= t_target:
        best = limit
    else:
        lo, hi = 1, limit  # invariant: predict(lo) <= t_target < predict(hi)
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if predict(mid) <= t_target:
                lo = mid
            else:
                hi = mid
        best = lo
        if abs(predict(hi) - t_target) <= abs(predict(lo) - t_target):
            best = hi
    steps = math.ceil(best / mbs)
    dss = min(steps * mbs, limit)
    return dss, predict(dss)


def dual_binary_search(
    K: float,
    E: int,
    t_target: float,
    dataset_limit: int,
    mem_limit: int,
    worker_id: int = -1,
) -> AllocationPlan:
    """Pick (dss, mbs) minimizing |predicted round time - t_target|.

    mbs ranges over the eight powers of two in [2, 256]; for each, dss is
    binary-searched in [1, min(dataset_limit, mem_limit)]. Ties prefer larger
    mbs (fewer steps), then larger dss (more data). A plan whose best
    achievable time still exceeds 2x the target carries a straggler warning.
    """
    if K <= 0 or E < 1 or t_target <= 0:
        raise ConfigurationError("K, E and t_target must be positive")
    limit = min(dataset_limit, mem_limit)
    if limit < 2:
        raise ConfigurationError("dataset/memory limit must allow at least 2 samples")
    best = None
    for mbs in MBS_DOMAIN:
        dss, predicted = _best_dss_for_mbs(K, E, t_target, mbs, limit)
        key = (abs(predicted - t_target), -mbs, -dss)
        if best is None or key < best[0]:
            best = (key, dss, mbs, predicted)
    _, dss, mbs, predicted = best
    return AllocationPlan(
        worker_id=worker_id,
        dss=dss,
        mbs=mbs,
        predicted_time_s=predicted,
        target_time_s=t_target,
        reallocated=True,
        straggler_warning=predicted > 2.0 * t_target,
    )


def reallocate(
    samples: Sequence[TimingSample],
    profiles: Mapping[int, WorkerProfile],
    dataset_limit: int,
    k_store: MutableMapping[int, float],
    E: int = 1,
    ewma: float = 0.0,
) -> list[AllocationPlan]:
    """Re-plan only fence-flagged workers toward the median observed time.

    Flagged workers first get their stored K refreshed from their latest
    sample (optionally EWMA-smoothed); everyone else keeps their current
    (dss, mbs). Raises InsufficientDataError with fewer than 4 samples.
    """
    times = [s.observed_time_s for s in samples]
    flagged = iqr_outliers(times)
    t_median = float(np.median(times))
    plans = []
    for i, sample in enumerate(samples):
        wid = sample.worker_id
        k_new = estimate_k(sample)
        if wid in k_store and ewma > 0.0:
            k_new = ewma * k_store[wid] + (1.0 - ewma) * k_new
        k_store[wid] = k_new
        if i in flagged:
            plan = dual_binary_search(
                k_new,
                E,
                t_median,
                dataset_limit,
                profiles[wid].mem_capacity,
                worker_id=wid,
            )
        else:
            plan = AllocationPlan(
                worker_id=wid,
                dss=sample.dss,
                mbs=sample.mbs,
                predicted_time_s=k_new * E * math.ceil(sample.dss / sample.mbs),
                target_time_s=t_median,
                reallocated=False,
            )
        plans.append(plan)
    return plans


def plan_prefetch(plan: AllocationPlan, comm: CommModel, start_time: float) -> float:
    """Arrival time of the plan's shard if its transfer starts at start_time.

    With prefetching the transfer starts at the triggering push, overlapping
    the receiver's ongoing compute; the worker stalls only when this arrival
    lands after its next round boundary.
    """
    return start_time + comm_delay(comm, comm.data_bytes(plan.dss))
