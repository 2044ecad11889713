"""End-to-end strategy drivers: bsp, asp, ssp, and the gated hermes strategy.

Every driver runs inside the deterministic event loop from simcore. Workers
compute real gradients on their shards (numpy, float64), so simulated clock
behaviour and numerical trajectories are both reproducible: identical
(config, seed) pairs give identical traces, ledgers, and weights.

Random streams are derived from the run seed as
``default_rng((seed, worker_id, ..., STREAM_*))`` so each worker's shard
draws, epoch shuffles, and timing jitter are independent of event
interleaving.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import aggregator as agg
from .allocator import (
    MBS_DOMAIN,
    AllocationPlan,
    TimingSample,
    plan_prefetch,
    reallocate,
)
from .dataio import Dataset, Shard, take_shard
from .errors import ConfigurationError, InsufficientDataError
from .gate import GateEvent, LossWindow, should_push
from .nnkernel import Batch, EvalReport, ModelArch, backward, forward_eval, init_params
from .simcore import (
    ApiCallLedger,
    Cluster,
    EventKind,
    EventQueue,
    SimEvent,
    comm_delay,
    run_events,
    sample_train_time,
)

STREAM_SHARD = 1
STREAM_SHUFFLE = 2
STREAM_JITTER = 3
STREAM_EVAL = 4

VALID_KINDS = ("bsp", "asp", "ssp", "hermes")


def shard_seed(seed: int, worker_id: int, draw_index: int) -> tuple:
    """Seed for a worker's draw_index-th shard sample."""
    return (seed, worker_id, draw_index, STREAM_SHARD)


def worker_shuffle_rng(seed: int, worker_id: int) -> np.random.Generator:
    """Stream of epoch permutations for one worker, consumed round by round."""
    return np.random.default_rng((seed, worker_id, STREAM_SHUFFLE))


def worker_jitter_rng(seed: int, worker_id: int) -> np.random.Generator:
    return np.random.default_rng((seed, worker_id, STREAM_JITTER))


def worker_eval_rng(seed: int, worker_id: int) -> np.random.Generator:
    return np.random.default_rng((seed, worker_id, STREAM_EVAL))


@dataclass
class Workload:
    """A training problem: train/test datasets plus the model shape."""

    train: Dataset
    test: Dataset
    arch: ModelArch

    def __post_init__(self):
        if self.train.dim != self.arch.input_dim or self.test.dim != self.arch.input_dim:
            raise ConfigurationError("dataset dim does not match arch.input_dim")
        if self.train.num_classes != self.arch.num_classes:
            raise ConfigurationError("dataset classes do not match arch.num_classes")


@dataclass
class StrategyConfig:
    kind: str
    eta: float = 0.1
    epochs: int = 1  # E: local epochs per round
    initial_dss: int = 600
    initial_mbs: int = 16
    target_accuracy: float = 0.95
    max_iters: int = 100_000
    patience: int = 25
    min_improvement: float = 1e-6
    max_sim_time: float | None = None
    staleness: float | None = None  # ssp bound s
    alpha: float = -1.6
    beta: float = 0.15
    lam: int = 5
    window: int = 10
    alpha_reset_on_push: bool = False
    worker_g_reset: str = "global_sigma"  # or "keep_local"
    prefetch: bool = True
    eval_cost_ratio: float = 0.33
    eval_batch: int | None = None  # gate eval on a random test subsample; None = full test set
    loss_floor: float = 1e-9

    def __post_init__(self):
        if self.kind not in VALID_KINDS:
            raise ConfigurationError(f"unknown strategy kind {self.kind!r}")
        if self.eta <= 0 or self.epochs < 1 or self.patience < 1 or self.max_iters < 1:
            raise ConfigurationError("eta, epochs, patience and max_iters must be positive")
        if self.initial_mbs not in MBS_DOMAIN:
            raise ConfigurationError(f"initial_mbs must be one of {MBS_DOMAIN}")
        if self.initial_dss < 1:
            raise ConfigurationError("initial_dss must be >= 1")
        if self.kind == "ssp":
            if self.staleness is None or self.staleness < 1:
                raise ConfigurationError("ssp requires staleness s >= 1")
        if self.kind == "hermes":
            if self.alpha >= 0:
                raise ConfigurationError("hermes requires alpha < 0")
            if not 0.0 < self.beta < 1.0:
                raise ConfigurationError("hermes requires beta in (0, 1)")
            if self.lam < 1 or self.window < 2:
                raise ConfigurationError("hermes requires lam >= 1 and window >= 2")
        if self.worker_g_reset not in ("global_sigma", "keep_local"):
            raise ConfigurationError("worker_g_reset must be global_sigma or keep_local")
        if self.eval_batch is not None and self.eval_batch < 1:
            raise ConfigurationError("eval_batch must be >= 1 (or None for the full test set)")


@dataclass
class RunResult:
    """Everything observable from one simulated run.

    accuracy_series holds (sim_time, accuracy, loss) per global evaluation,
    with sim_times made strictly increasing (equal-time aggregations are
    nudged by one ulp, preserving order).
    """

    strategy: str
    seed: int
    wall_sim_time_s: float
    total_iterations: int
    accuracy_series: list[tuple[float, float, float]]
    converged: bool
    stop_reason: str
    ledger: ApiCallLedger
    per_worker_iterations: dict[int, int]
    per_worker_model_requests: dict[int, int]
    pushes_total: int
    final_accuracy: float
    final_loss: float
    final_weights: np.ndarray
    trace: list[SimEvent]
    gate_rows: list[dict] = field(default_factory=list)
    alloc_rows: list[dict] = field(default_factory=list)
    agg_rows: list[dict] = field(default_factory=list)

    @property
    def api_calls_total(self) -> int:
        return self.ledger.total()


def local_train(
    params_start: np.ndarray,
    grad_start: np.ndarray,
    ds: Dataset,
    shard: Shard,
    arch: ModelArch,
    mbs: int,
    epochs: int,
    eta: float,
    shuffle_rng: np.random.Generator,
):
    """E epochs of mini-batch SGD over a shard.

    Returns (grad_acc, params): the accumulated sum of step gradients and the
    final weights, so ``params == params_start - eta * (grad_acc - grad_start)``
    holds exactly along the trajectory.
    """
    w = np.array(params_start, dtype=np.float64, copy=True)
    g_acc = np.array(grad_start, dtype=np.float64, copy=True)
    for _ in range(epochs):
        order = shard.indices[shuffle_rng.permutation(shard.size)]
        for lo in range(0, shard.size, mbs):
            rows = order[lo : lo + mbs]
            step = backward(w, Batch(ds.features[rows], ds.labels[rows]), arch)
            g_acc += step
            w -= eta * step
    return g_acc, w


@dataclass
class _PendingPlan:
    plan: AllocationPlan
    shard: Shard
    arrive: float | None  # None: transfer serialized at the next round boundary
    # refills keep the current plan size: the worker may keep computing on its
    # old shard until the transfer lands instead of stalling at the boundary
    defer_ok: bool = False


class _DriverBase:
    kind = "base"

    def __init__(self, cfg: StrategyConfig, cluster: Cluster, workload: Workload, seed: int):
        if cfg.kind != self.kind:
            raise ConfigurationError(f"config kind {cfg.kind!r} passed to {self.kind} driver")
        if seed < 0:
            raise ConfigurationError("seed must be a non-negative integer")
        self.cfg = cfg
        self.seed = seed
        self.workload = workload
        self.arch = workload.arch
        self.train = workload.train
        self.test_batch = Batch(workload.test.features, workload.test.labels)
        self.profiles = cluster.copy_workers()
        self.worker_ids = sorted(self.profiles)
        self.comm = cluster.comm
        self.model_bytes = self.comm.model_bytes(self.arch.param_count)

        self.ledger = ApiCallLedger()
        self.series: list[tuple[float, float, float]] = []
        self.iterations = {w: 0 for w in self.worker_ids}
        self.model_requests = {w: 0 for w in self.worker_ids}
        self.total_iterations = 0
        self.pushes_total = 0
        self.converged = False
        self.stop_reason = "drained"
        self._stopped = False
        self._best_loss = math.inf
        self._stale_evals = 0
        self.gate_rows: list[dict] = []
        self.alloc_rows: list[dict] = []
        self.agg_rows: list[dict] = []

        self._shuffle = {w: worker_shuffle_rng(seed, w) for w in self.worker_ids}
        self._jitter = {w: worker_jitter_rng(seed, w) for w in self.worker_ids}
        self._shard_draws = {w: 0 for w in self.worker_ids}

    # -- shared plumbing ---------------------------------------------------

    def _next_shard(self, worker_id: int, dss: int) -> Shard:
        draw = self._shard_draws[worker_id]
        self._shard_draws[worker_id] += 1
        return take_shard(self.train, dss, shard_seed(self.seed, worker_id, draw))

    def _sample_time(self, worker_id: int, dss: int, mbs: int) -> float:
        return sample_train_time(
            self.profiles[worker_id], self.cfg.epochs, dss, mbs, self._jitter[worker_id]
        )

    def _eval_global(self, params: np.ndarray) -> EvalReport:
        return forward_eval(params, self.test_batch, self.arch)

    def _record_global(self, t: float, report: EvalReport) -> None:
        if self.series and t <= self.series[-1][0]:
            t = math.nextafter(self.series[-1][0], math.inf)
        self.series.append((t, report.accuracy, report.mean_loss))
        if report.accuracy >= self.cfg.target_accuracy:
            self.converged = True
            self._halt("target_accuracy")
            return
        if report.mean_loss <= self._best_loss - self.cfg.min_improvement:
            self._best_loss = report.mean_loss
            self._stale_evals = 0
        else:
            self._stale_evals += 1
            if self._stale_evals >= self.cfg.patience:
                self._halt("patience")

    def _halt(self, reason: str) -> None:
        self._stopped = True
        self.stop_reason = reason

    def _handle(self, ev: SimEvent, queue: EventQueue) -> None:
        self.ledger.record_event(ev)
        if self.cfg.max_sim_time is not None and ev.time_s >= self.cfg.max_sim_time:
            self._halt("max_sim_time")
            return
        if ev.kind == EventKind.TRAIN_DONE:
            self._on_train_done(ev, queue)
        elif ev.kind == EventKind.PUSH_ARRIVE_PS:
            self._on_push_arrive(ev, queue)
        elif ev.kind == EventKind.MODEL_ARRIVE_WORKER:
            self._on_model_arrive(ev, queue)
        elif ev.kind == EventKind.DATA_ARRIVE_WORKER:
            self._on_data_arrive(ev, queue)
        elif ev.kind == EventKind.EVAL_DONE:
            self._on_eval_done(ev, queue)

    # default no-op handlers; arrival events mostly exist for trace/ledger
    def _on_train_done(self, ev, queue):
        pass

    def _on_push_arrive(self, ev, queue):
        pass

    def _on_model_arrive(self, ev, queue):
        pass

    def _on_data_arrive(self, ev, queue):
        pass

    def _on_eval_done(self, ev, queue):
        pass

    def _bootstrap_worker(self, queue_events: list, worker_id: int, dss: int) -> float:
        """Initial model+data delivery events; returns the worker's start time."""
        t_model = comm_delay(self.comm, self.model_bytes)
        t_data = comm_delay(self.comm, self.comm.data_bytes(dss))
        queue_events.append(
            SimEvent(t_model, worker_id, EventKind.MODEL_ARRIVE_WORKER,
                     bytes=self.model_bytes, messages=("req_global_model",))
        )
        queue_events.append(
            SimEvent(t_data, worker_id, EventKind.DATA_ARRIVE_WORKER,
                     bytes=self.comm.data_bytes(dss), messages=("req_dataset",))
        )
        return max(t_model, t_data)

    def _finish(self, trace: list[SimEvent], final_weights: np.ndarray) -> RunResult:
        if self.series:
            final_acc, final_loss = self.series[-1][1], self.series[-1][2]
        else:
            final_acc, final_loss = float("nan"), float("nan")
        return RunResult(
            strategy=self.kind,
            seed=self.seed,
            wall_sim_time_s=trace[-1].time_s if trace else 0.0,
            total_iterations=self.total_iterations,
            accuracy_series=self.series,
            converged=self.converged,
            stop_reason=self.stop_reason,
            ledger=self.ledger,
            per_worker_iterations=dict(self.iterations),
            per_worker_model_requests=dict(self.model_requests),
            pushes_total=self.pushes_total,
            final_accuracy=final_acc,
            final_loss=final_loss,
            final_weights=final_weights,
            trace=trace,
            gate_rows=self.gate_rows,
            alloc_rows=self.alloc_rows,
            agg_rows=self.agg_rows,
        )


class _BspDriver(_DriverBase):
    """Barrier rounds: distribute shards, wait for the slowest, average, broadcast."""

    kind = "bsp"

    def run(self) -> RunResult:
        self.w_global = init_params(self.arch, self.seed)
        self.dss = min(
            self.cfg.initial_dss,
            min(p.mem_capacity for p in self.profiles.values()),
            self.train.n,
        )
        self.mbs = self.cfg.initial_mbs
        self.round_grads: dict[int, np.ndarray] = {}
        self.shards: dict[int, Shard] = {}
        self.round_index = 0
        self.push_arrivals = 0

        initial: list[SimEvent] = []
        for wid in self.worker_ids:
            start = self._bootstrap_worker(initial, wid, self.dss)
            self.shards[wid] = self._next_shard(wid, self.dss)
            tau = self._sample_time(wid, self.dss, self.mbs)
            initial.append(SimEvent(start + tau, wid, EventKind.TRAIN_DONE))
        trace = run_events(initial, self._handle, stop=lambda: self._stopped)
        return self._finish(trace, self.w_global)

    def _on_train_done(self, ev, queue):
        wid = ev.worker_id
        g_acc, _ = local_train(
            self.w_global,
            np.zeros_like(self.w_global),
            self.train,
            self.shards[wid],
            self.arch,
            self.mbs,
            self.cfg.epochs,
            self.cfg.eta,
            self._shuffle[wid],
        )
        self.round_grads[wid] = g_acc
        # one barrier round = one local iteration begun from a fresh broadcast
        self.iterations[wid] += 1
        self.model_requests[wid] += 1
        queue.schedule(
            SimEvent(
                ev.time_s + comm_delay(self.comm, self.model_bytes),
                wid,
                EventKind.PUSH_ARRIVE_PS,
                bytes=self.model_bytes,
                messages=("push_gradients",),
            )
        )

    def _on_push_arrive(self, ev, queue):
        self.push_arrivals += 1
        if self.push_arrivals < len(self.worker_ids):
            return
        self.push_arrivals = 0
        grads = [self.round_grads[w] for w in self.worker_ids]
        self.w_global = agg.sync_aggregate(self.w_global, grads, self.cfg.eta)
        self.round_grads = {}
        self.round_index += 1
        self.total_iterations += 1
        self.pushes_total += len(self.worker_ids)
        self._record_global(ev.time_s, self._eval_global(self.w_global))
        if self._stopped:
            return
        if self.round_index >= self.cfg.max_iters:
            self._halt("max_iters")
            return
        data_bytes = self.comm.data_bytes(self.dss)
        t_model = ev.time_s + comm_delay(self.comm, self.model_bytes)
        t_data = ev.time_s + comm_delay(self.comm, data_bytes)
        for wid in self.worker_ids:
            queue.schedule(
                SimEvent(t_model, wid, EventKind.MODEL_ARRIVE_WORKER,
                         bytes=self.model_bytes, messages=("req_global_model",))
            )
            queue.schedule(
                SimEvent(t_data, wid, EventKind.DATA_ARRIVE_WORKER,
                         bytes=data_bytes, messages=("req_dataset",))
            )
            self.shards[wid] = self._next_shard(wid, self.dss)
            tau = self._sample_time(wid, self.dss, self.mbs)
            queue.schedule(
                SimEvent(max(t_model, t_data) + tau, wid, EventKind.TRAIN_DONE)
            )


class _AsyncDriver(_DriverBase):
    """Shared loop for asp and ssp; ssp adds the bounded-staleness block."""

    def __init__(self, cfg, cluster, workload, seed, bound: float):
        super().__init__(cfg, cluster, workload, seed)
        self.bound = bound

    def run(self) -> RunResult:
        self.w_global = init_params(self.arch, self.seed)
        self.dss = min(
            self.cfg.initial_dss,
            min(p.mem_capacity for p in self.profiles.values()),
            self.train.n,
        )
        self.mbs = self.cfg.initial_mbs
        self.w_ref: dict[int, np.ndarray] = {}
        self.shards: dict[int, Shard] = {}
        self.pending_push: dict[int, np.ndarray] = {}
        self.waiting: set[int] = set()

        initial: list[SimEvent] = []
        for wid in self.worker_ids:
            start = self._bootstrap_worker(initial, wid, self.dss)
            self.w_ref[wid] = self.w_global.copy()
            self.shards[wid] = self._next_shard(wid, self.dss)
            tau = self._sample_time(wid, self.dss, self.mbs)
            initial.append(SimEvent(start + tau, wid, EventKind.TRAIN_DONE))
        trace = run_events(initial, self._handle, stop=lambda: self._stopped)
        return self._finish(trace, self.w_global)

    def _on_train_done(self, ev, queue):
        wid = ev.worker_id
        g_acc, _ = local_train(
            self.w_ref[wid],
            np.zeros_like(self.w_global),
            self.train,
            self.shards[wid],
            self.arch,
            self.mbs,
            self.cfg.epochs,
            self.cfg.eta,
            self._shuffle[wid],
        )
        self.pending_push[wid] = g_acc
        queue.schedule(
            SimEvent(
                ev.time_s + comm_delay(self.comm, self.model_bytes),
                wid,
                EventKind.PUSH_ARRIVE_PS,
                bytes=self.model_bytes,
                messages=("push_gradients",),
            )
        )

    def _on_push_arrive(self, ev, queue):
        wid = ev.worker_id
        self.w_global = agg.async_apply(self.w_global, self.pending_push.pop(wid), self.cfg.eta)
        # every async iteration began from a freshly fetched model
        self.iterations[wid] += 1
        self.model_requests[wid] += 1
        self.total_iterations += 1
        self.pushes_total += 1
        self._record_global(ev.time_s, self._eval_global(self.w_global))
        if self._stopped:
            return
        if self.total_iterations >= self.cfg.max_iters:
            self._halt("max_iters")
            return
        self._maybe_start(wid, ev.time_s, queue)
        for other in sorted(self.waiting):
            if self._clear_to_start(other):
                self.waiting.discard(other)
                self._start_iteration(other, ev.time_s, queue)

    def _clear_to_start(self, wid: int) -> bool:
        # a worker about to run iteration i blocks while i - min_j(iter_j) > s
        return (self.iterations[wid] + 1) - min(self.iterations.values()) <= self.bound

    def _maybe_start(self, wid: int, t: float, queue) -> None:
        if self._clear_to_start(wid):
            self._start_iteration(wid, t, queue)
        else:
            self.waiting.add(wid)

    def _start_iteration(self, wid: int, t: float, queue) -> None:
        self.w_ref[wid] = self.w_global.copy()
        data_bytes = self.comm.data_bytes(self.dss)
        t_model = t + comm_delay(self.comm, self.model_bytes)
        t_data = t + comm_delay(self.comm, data_bytes)
        queue.schedule(
            SimEvent(t_model, wid, EventKind.MODEL_ARRIVE_WORKER,
                     bytes=self.model_bytes, messages=("req_global_model",))
        )
        queue.schedule(
            SimEvent(t_data, wid, EventKind.DATA_ARRIVE_WORKER,
                     bytes=data_bytes, messages=("req_dataset",))
        )
        self.shards[wid] = self._next_shard(wid, self.dss)
        tau = self._sample_time(wid, self.dss, self.mbs)
        queue.schedule(SimEvent(max(t_model, t_data) + tau, wid, EventKind.TRAIN_DONE))


class _AspDriver(_AsyncDriver):
    kind = "asp"

    def __init__(self, cfg, cluster, workload, seed):
        super().__init__(cfg, cluster, workload, seed, bound=math.inf)


class _SspDriver(_AsyncDriver):
    kind = "ssp"

    def __init__(self, cfg, cluster, workload, seed):
        super().__init__(cfg, cluster, workload, seed, bound=cfg.staleness)


class _HermesDriver(_DriverBase):
    """Gated asynchronous strategy with loss-weighted aggregation.

    Workers loop train -> local test eval -> gate. Pushes carry the worker's
    cumulative-from-w0 gradient; the PS blends it by reciprocal test losses,
    refreshes the pusher, and re-plans fence-flagged workers toward the median
    round time, prefetching their new shards.
    """

    kind = "hermes"

    def run(self) -> RunResult:
        w0 = init_params(self.arch, self.seed)
        self.state = agg.GlobalState(w0=w0, eta=self.cfg.eta)
        self.evaluate_loss = lambda params: forward_eval(
            params, self.test_batch, self.arch
        ).mean_loss
        dss0 = min(
            self.cfg.initial_dss,
            min(p.mem_capacity for p in self.profiles.values()),
            self.train.n,
        )
        self.plans: dict[int, AllocationPlan] = {}
        self.shards: dict[int, Shard] = {}
        self.w_local: dict[int, np.ndarray] = {}
        self.g_local: dict[int, np.ndarray] = {}
        self.windows: dict[int, LossWindow] = {}
        self.pending: dict[int, _PendingPlan] = {}
        self.pending_push: dict[int, tuple[np.ndarray, float]] = {}
        self.awaiting_refresh: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self.timing: dict[int, TimingSample] = {}
        self.k_store: dict[int, float] = {}
        self.alloc_seq = 0
        self.last_duration: dict[int, float] = {}
        # True while the worker's current iteration began from a fresh global
        # model; completing such an iteration is what counts as a model request
        self.fresh_model = {w: True for w in self.worker_ids}
        self._eval_rng = {w: worker_eval_rng(self.seed, w) for w in self.worker_ids}

        initial: list[SimEvent] = []
        for wid in self.worker_ids:
            self.plans[wid] = AllocationPlan(
                worker_id=wid,
                dss=dss0,
                mbs=self.cfg.initial_mbs,
                predicted_time_s=0.0,
                target_time_s=0.0,
            )
            self.shards[wid] = self._next_shard(wid, dss0)
            self.w_local[wid] = w0.copy()
            self.g_local[wid] = np.zeros_like(w0)
            self.windows[wid] = LossWindow(
                capacity=self.cfg.window,
                alpha=self.cfg.alpha,
                beta=self.cfg.beta,
                lam=self.cfg.lam,
                alpha_reset_on_push=self.cfg.alpha_reset_on_push,
            )
            start = self._bootstrap_worker(initial, wid, dss0)
            tau = self._sample_time(wid, dss0, self.cfg.initial_mbs)
            self.last_duration[wid] = tau
            initial.append(SimEvent(start + tau, wid, EventKind.TRAIN_DONE))
        trace = run_events(initial, self._handle, stop=lambda: self._stopped)
        return self._finish(trace, self.state.weights)

    # -- worker side ---------------------------------------------------------

    def _eval_count(self) -> int:
        if self.cfg.eval_batch is None:
            return self.test_batch.n
        return min(self.cfg.eval_batch, self.test_batch.n)

    def _eval_seconds(self, wid: int, mbs: int) -> float:
        steps = math.ceil(self._eval_count() / mbs)
        return self.profiles[wid].K * steps * self.cfg.eval_cost_ratio

    def _gate_loss(self, wid: int) -> float:
        """Worker-side test loss for gating, on its (sub)sampled test copy."""
        n_eval = self._eval_count()
        if n_eval == self.test_batch.n:
            batch = self.test_batch
        else:
            rows = self._eval_rng[wid].choice(self.test_batch.n, size=n_eval, replace=False)
            batch = Batch(self.test_batch.features[rows], self.test_batch.labels[rows])
        return forward_eval(self.w_local[wid], batch, self.arch).mean_loss

    def _on_train_done(self, ev, queue):
        wid = ev.worker_id
        plan = self.plans[wid]
        self.timing[wid] = TimingSample(
            worker_id=wid,
            observed_time_s=self.last_duration[wid],
            dss=plan.dss,
            mbs=plan.mbs,
            E=self.cfg.epochs,
        )
        self.g_local[wid], self.w_local[wid] = local_train(
            self.w_local[wid],
            self.g_local[wid],
            self.train,
            self.shards[wid],
            self.arch,
            plan.mbs,
            self.cfg.epochs,
            self.cfg.eta,
            self._shuffle[wid],
        )
        queue.schedule(
            SimEvent(ev.time_s + self._eval_seconds(wid, plan.mbs), wid, EventKind.EVAL_DONE)
        )

    def _on_eval_done(self, ev, queue):
        wid = ev.worker_id
        x = self._gate_loss(wid)
        gev = should_push(self.windows[wid], x)
        self.iterations[wid] += 1
        self.total_iterations += self.cfg.epochs
        if self.fresh_model[wid]:
            self.model_requests[wid] += 1
            self.fresh_model[wid] = False
        self.gate_rows.append(
            {
                "worker": wid,
                "iter": self.iterations[wid],
                "loss": x,
                "mu": gev.mu,
                "sigma": gev.sigma,
                "z": gev.z,
                "alpha": gev.alpha,
                "decision": "push" if gev.pushed else "hold",
            }
        )
        if self.total_iterations >= self.cfg.max_iters:
            self._halt("max_iters")
            return
        if gev.pushed:
            self.pending_push[wid] = (self.g_local[wid].copy(), x)
            queue.schedule(
                SimEvent(
                    ev.time_s + comm_delay(self.comm, self.model_bytes),
                    wid,
                    EventKind.PUSH_ARRIVE_PS,
                    bytes=self.model_bytes,
                    messages=("push_gradients", "send_loss"),
                )
            )
        else:
            self._resume_local(wid, ev.time_s, queue)

    def _resume_local(self, wid: int, t: float, queue) -> None:
        start = t
        pend = self.pending.get(wid)
        if pend is not None and pend.defer_ok and pend.arrive is not None and pend.arrive > t:
            pend = None  # refill still in flight; keep training on the old shard
        else:
            pend = self.pending.pop(wid, None)
        if pend is not None:
            if pend.arrive is None:
                # prefetch disabled: transfer runs serially from this boundary
                arrive = plan_prefetch(pend.plan, self.comm, t)
                queue.schedule(
                    SimEvent(arrive, wid, EventKind.DATA_ARRIVE_WORKER,
                             bytes=self.comm.data_bytes(pend.plan.dss),
                             messages=("req_dataset",))
                )
                start = arrive
            else:
                start = max(t, pend.arrive)  # stall only if the prefetch is late
            self.plans[wid] = pend.plan
            self.shards[wid] = pend.shard
        plan = self.plans[wid]
        tau = self._sample_time(wid, plan.dss, plan.mbs)
        self.last_duration[wid] = tau
        queue.schedule(SimEvent(start + tau, wid, EventKind.TRAIN_DONE))

    # -- PS side ---------------------------------------------------------------

    def _on_push_arrive(self, ev, queue):
        wid = ev.worker_id
        g_pushed, local_loss = self.pending_push.pop(wid)
        push = agg.WorkerPush(
            worker_id=wid,
            grad=g_pushed,
            local_test_loss=local_loss,
            iter_count=self.iterations[wid],
        )
        if not self.state.initialized:
            rec = agg.initial_push(self.state, push, self.evaluate_loss)
        else:
            rec = agg.loss_weighted_aggregate(
                self.state, push, self.evaluate_loss, self.cfg.loss_floor
            )
        self.pushes_total += 1
        self.agg_rows.append(
            {
                "sim_time": ev.time_s,
                "worker": wid,
                "loss_temp": rec.loss_temp,
                "loss_before": rec.loss_before,
                "loss_after": rec.loss_after,
                "w1": rec.w1,
                "w2": rec.w2,
            }
        )
        self._record_global(ev.time_s, self._eval_global(self.state.weights))
        if self._stopped:
            return
        self._reallocate_flagged(ev.time_s, queue)
        # refresh the pusher: capture the snapshot now, deliver after the wire delay
        self.awaiting_refresh[wid] = agg.refresh_worker(self.state)
        queue.schedule(
            SimEvent(
                ev.time_s + comm_delay(self.comm, self.model_bytes),
                wid,
                EventKind.MODEL_ARRIVE_WORKER,
                bytes=self.model_bytes,
                messages=("req_global_model",),
            )
        )
        # a push is also answered with a fresh shard at the current plan size
        # (reallocation above may already have queued one with a new plan)
        if wid not in self.pending:
            plan = self.plans[wid]
            refill = AllocationPlan(
                worker_id=wid,
                dss=plan.dss,
                mbs=plan.mbs,
                predicted_time_s=plan.predicted_time_s,
                target_time_s=plan.target_time_s,
            )
            arrive = plan_prefetch(refill, self.comm, ev.time_s)
            queue.schedule(
                SimEvent(arrive, wid, EventKind.DATA_ARRIVE_WORKER,
                         bytes=self.comm.data_bytes(refill.dss),
                         messages=("req_dataset",))
            )
            self.pending[wid] = _PendingPlan(
                refill, self._next_shard(wid, refill.dss), arrive, defer_ok=True
            )

    def _reallocate_flagged(self, t: float, queue) -> None:
        samples = [self.timing[w] for w in sorted(self.timing)]
        if len(samples) < 4:
            return
        try:
            plans = reallocate(
                samples, self.profiles, self.train.n, self.k_store, E=self.cfg.epochs
            )
        except InsufficientDataError:
            return
        self.alloc_seq += 1
        for plan in plans:
            if not plan.reallocated or plan.worker_id in self.pending:
                continue
            j = plan.worker_id
            self.alloc_rows.append(
                {
                    "round": self.alloc_seq,
                    "worker": j,
                    "dss": plan.dss,
                    "mbs": plan.mbs,
                    "predicted": plan.predicted_time_s,
                    "observed": self.timing[j].observed_time_s,
                    "target": plan.target_time_s,
                }
            )
            new_shard = self._next_shard(j, plan.dss)
            if self.cfg.prefetch:
                arrive = plan_prefetch(plan, self.comm, t)
                queue.schedule(
                    SimEvent(arrive, j, EventKind.DATA_ARRIVE_WORKER,
                             bytes=self.comm.data_bytes(plan.dss),
                             messages=("req_dataset",))
                )
                self.pending[j] = _PendingPlan(plan, new_shard, arrive)
            else:
                self.pending[j] = _PendingPlan(plan, new_shard, None)

    def _on_model_arrive(self, ev, queue):
        wid = ev.worker_id
        if wid not in self.awaiting_refresh:
            return  # bootstrap delivery; the initial TRAIN_DONE is already queued
        weights, sigma_copy = self.awaiting_refresh.pop(wid)
        if self.cfg.worker_g_reset == "global_sigma":
            self.w_local[wid] = weights.copy()
            self.g_local[wid] = sigma_copy
        # keep_local: the worker keeps its own trajectory and ignores the refresh
        self.fresh_model[wid] = True
        self._resume_local(wid, ev.time_s, queue)


def early_stop(losses: Iterable[float], patience: int, min_improvement: float = 1e-6) -> bool:
    """True when the series ran ``patience`` consecutive evals with no improvement."""
    if patience < 1:
        raise ConfigurationError("patience must be >= 1")
    best = math.inf
    stale = 0
    for loss in losses:
        if loss <= best - min_improvement:
            best = loss
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                return True
    return False


def run_bsp(cfg, cluster, workload, seed: int) -> RunResult:
    return _BspDriver(cfg, cluster, workload, seed).run()


def run_asp(cfg, cluster, workload, seed: int) -> RunResult:
    return _AspDriver(cfg, cluster, workload, seed).run()


def run_ssp(cfg, cluster, workload, seed: int) -> RunResult:
    return _SspDriver(cfg, cluster, workload, seed).run()


def run_hermes(cfg, cluster, workload, seed: int) -> RunResult:
    return _HermesDriver(cfg, cluster, workload, seed).run()


_DRIVERS = {"bsp": run_bsp, "asp": run_asp, "ssp": run_ssp, "hermes": run_hermes}


def run_strategy(cfg: StrategyConfig, cluster: Cluster, workload: Workload, seed: int) -> RunResult:
    return _DRIVERS[cfg.kind](cfg, cluster, workload, seed)
