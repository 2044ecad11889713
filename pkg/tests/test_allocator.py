from __future__ import annotations

import math

import numpy as np
import pytest

from edgedml.allocator import (
    MBS_DOMAIN,
    AllocationPlan,
    TimingSample,
    dual_binary_search,
    estimate_k,
    iqr_outliers,
    plan_prefetch,
    reallocate,
)
from edgedml.errors import ConfigurationError, InsufficientDataError
from edgedml.simcore import CommModel, WorkerProfile


def brute_force_fences(times):
    """Independent re-implementation of the quartile fence rule (oracle)."""
    arr = sorted(times)
    n = len(arr)

    def quantile(p):
        pos = p * (n - 1)
        lo = math.floor(pos)
        hi = math.ceil(pos)
        return arr[lo] + (pos - lo) * (arr[hi] - arr[lo])

    q1, q3 = quantile(0.25), quantile(0.75)
    iqr = q3 - q1
    return {
        i for i, t in enumerate(times) if t < q1 - 1.5 * iqr or t > q3 + 1.5 * iqr
    }


def oracle_plan(K, E, t_target, dataset_limit, mem_limit):
    """Closed-form 8-way scan: best step count per mbs, shared tie rules (oracle)."""
    limit = min(dataset_limit, mem_limit)
    step_cost = K * E
    best = None
    for mbs in MBS_DOMAIN:
        max_steps = math.ceil(limit / mbs)
        s_real = t_target / step_cost
        candidates = {
            min(max_steps, max(1, math.floor(s_real))),
            min(max_steps, max(1, math.ceil(s_real))),
        }
        for steps in candidates:
            dss = min(steps * mbs, limit)
            predicted = step_cost * steps
            key = (abs(predicted - t_target), -mbs, -dss)
            if best is None or key < best[0]:
                best = (key, dss, mbs, predicted)
    return best[1], best[2], best[3]


def test_iqr_high_outlier_worked_example():
    # Q1=2.1, Q3=2.3, fences [1.8, 2.6]
    assert iqr_outliers([2.0, 2.1, 2.2, 2.3, 9.0]) == {4}


def test_iqr_low_outlier_fast_worker():
    assert iqr_outliers([0.1, 2.0, 2.1, 2.2, 2.3]) == {0}


def test_iqr_all_equal_no_outliers():
    assert iqr_outliers([2.0] * 8) == set()


def test_iqr_insufficient_samples():
    with pytest.raises(InsufficientDataError):
        iqr_outliers([1.0, 2.0, 3.0])


def test_iqr_matches_brute_force_on_random_samples():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(4, 30))
        times = rng.lognormal(0.0, 0.8, n).tolist()
        assert iqr_outliers(times) == brute_force_fences(times)


def test_estimate_k_worked_example():
    sample = TimingSample(worker_id=0, observed_time_s=2.0096, dss=2500, mbs=16, E=1)
    assert estimate_k(sample) == pytest.approx(0.0128, rel=1e-12)  # 157 steps


def test_estimate_k_round_trips_single_step():
    sample = TimingSample(worker_id=0, observed_time_s=0.75, dss=32, mbs=32, E=3)
    assert estimate_k(sample) == pytest.approx(0.25)


def test_estimate_k_linear_in_observed_time():
    a = TimingSample(0, 1.5, 100, 8, 1)
    b = TimingSample(0, 3.0, 100, 8, 1)
    assert estimate_k(b) == pytest.approx(2 * estimate_k(a))


def test_dual_binary_search_median_target_example():
    # continuous form gives dss = t*mbs/(K*E) = 30820; the staircase model lands
    # within one dss step of it at the same mbs
    plan = dual_binary_search(K=0.002, E=1, t_target=7.705, dataset_limit=51000, mem_limit=10**9)
    assert plan.mbs == 8
    assert abs(plan.dss - 30820) <= plan.mbs
    assert abs(plan.predicted_time_s - 7.705) <= 0.002 + 1e-12
    assert not plan.straggler_warning


def test_dual_binary_search_one_step_tie_prefers_largest():
    plan = dual_binary_search(K=0.01, E=1, t_target=0.01, dataset_limit=100000, mem_limit=10**9)
    assert (plan.dss, plan.mbs) == (256, 256)
    assert plan.predicted_time_s == pytest.approx(0.01)


def test_dual_binary_search_straggler_warning_when_unreachable():
    # even a single step costs 1s against a 0.4s target
    plan = dual_binary_search(K=1.0, E=1, t_target=0.4, dataset_limit=10**6, mem_limit=10**6)
    assert plan.straggler_warning
    assert plan.predicted_time_s == pytest.approx(1.0)


def test_dual_binary_search_respects_limits():
    plan = dual_binary_search(K=1e-5, E=1, t_target=100.0, dataset_limit=5000, mem_limit=700)
    assert plan.dss <= 700
    assert plan.mbs in MBS_DOMAIN


def test_dual_binary_search_matches_oracle_on_random_grid():
    rng = np.random.default_rng(42)
    for _ in range(1000):
        K = float(rng.uniform(0.0005, 0.1))
        t_target = float(rng.uniform(0.01, 20.0))
        limit = int(rng.integers(64, 60000))
        E = int(rng.integers(1, 4))
        plan = dual_binary_search(K, E, t_target, limit, 10**9)
        odss, ombs, opred = oracle_plan(K, E, t_target, limit, 10**9)
        assert plan.mbs == ombs
        assert abs(plan.dss - odss) <= plan.mbs
        assert abs(plan.predicted_time_s - t_target) <= abs(opred - t_target) + K * E + 1e-12


def test_dual_binary_search_validates():
    with pytest.raises(ConfigurationError):
        dual_binary_search(K=0.0, E=1, t_target=1.0, dataset_limit=100, mem_limit=100)
    with pytest.raises(ConfigurationError):
        dual_binary_search(K=1.0, E=1, t_target=1.0, dataset_limit=1, mem_limit=1)


def make_profiles(n, mem=100000):
    return {i: WorkerProfile(worker_id=i, K=0.01, mem_capacity=mem) for i in range(n)}


def test_reallocate_no_outliers_keeps_plans():
    samples = [TimingSample(i, 2.0 + 0.01 * i, dss=320, mbs=16, E=1) for i in range(6)]
    plans = reallocate(samples, make_profiles(6), dataset_limit=50000, k_store={})
    assert all(not p.reallocated for p in plans)
    assert all((p.dss, p.mbs) == (320, 16) for p in plans)


def test_reallocate_slow_outlier_lands_near_median():
    samples = [TimingSample(i, t, dss=320, mbs=16, E=1) for i, t in enumerate([2.0, 2.1, 2.2, 2.3, 9.0])]
    k_store = {}
    plans = reallocate(samples, make_profiles(5), dataset_limit=50000, k_store=k_store)
    flagged = [p for p in plans if p.reallocated]
    assert [p.worker_id for p in flagged] == [4]
    plan = flagged[0]
    t_median = 2.2
    k = 9.0 / 20  # estimate from the slow sample: 20 steps at (320, 16)
    assert k_store[4] == pytest.approx(k)
    assert abs(plan.predicted_time_s - t_median) <= k + 1e-12  # within one search step
    assert math.ceil(plan.dss / plan.mbs) < 20  # strictly fewer gradient steps than before


def test_reallocate_fast_outlier_gets_more_data():
    samples = [TimingSample(i, t, dss=320, mbs=16, E=1) for i, t in enumerate([0.4, 2.0, 2.1, 2.2, 2.3])]
    plans = reallocate(samples, make_profiles(5), dataset_limit=50000, k_store={})
    fast = [p for p in plans if p.reallocated][0]
    assert fast.worker_id == 0
    assert fast.dss > 320


def test_reallocate_propagates_insufficient_data():
    samples = [TimingSample(0, 1.0, 10, 2, 1)]
    with pytest.raises(InsufficientDataError):
        reallocate(samples, make_profiles(1), dataset_limit=100, k_store={})


def test_reallocate_ewma_smooths_k():
    samples = [TimingSample(i, t, dss=320, mbs=16, E=1) for i, t in enumerate([2.0, 2.1, 2.2, 2.3, 9.0])]
    k_store = {4: 0.1}
    reallocate(samples, make_profiles(5), dataset_limit=50000, k_store=k_store, ewma=0.5)
    assert k_store[4] == pytest.approx(0.5 * 0.1 + 0.5 * (9.0 / 20))


def test_plan_prefetch_arrival_time():
    plan = AllocationPlan(worker_id=0, dss=1000, mbs=16, predicted_time_s=1.0, target_time_s=1.0)
    comm = CommModel(latency_s=0.005, bandwidth_Bps=1e6, sample_bytes=100)
    # 1000 samples * 100 B at 1 MB/s = 0.1 s after the 5 ms latency
    assert plan_prefetch(plan, comm, start_time=2.0) == pytest.approx(2.105)


def test_allocation_plan_validates_mbs_domain():
    with pytest.raises(ConfigurationError):
        AllocationPlan(worker_id=0, dss=10, mbs=10, predicted_time_s=1.0, target_time_s=1.0)
