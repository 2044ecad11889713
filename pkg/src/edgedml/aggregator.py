"""Parameter-server update rules.

Three flavours: synchronous averaging (one barrier round = one step on the
mean gradient), immediate asynchronous apply, and loss-weighted aggregation
of cumulative gradients. The loss-weighted rule keeps the global model as
``w0 - eta * sigma_acc`` where sigma_acc blends each arriving worker's
cumulative gradient G with weights inversely proportional to the test losses
of the global model and of the worker's implied model.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import SimulationError

Array = np.ndarray

LOSS_FLOOR = 1e-9


@dataclass
class GlobalState:
    """PS-side state; global weights are always w0 - eta * sigma_acc."""

    w0: Array
    eta: float
    sigma_acc: Array = field(init=False)
    loss: float = field(init=False, default=float("inf"))
    initialized: bool = field(init=False, default=False)

    def __post_init__(self):
        self.w0 = np.asarray(self.w0, dtype=np.float64).copy()
        self.w0.setflags(write=False)
        self.sigma_acc = np.zeros_like(self.w0)

    @property
    def weights(self) -> Array:
        return self.w0 - self.eta * self.sigma_acc


@dataclass
class WorkerPush:
    """One gradient push: the worker's cumulative gradient G from w0."""

    worker_id: int
    grad: Array
    local_test_loss: float = float("nan")
    iter_count: int = 0

    def __post_init__(self):
        self.grad = np.asarray(self.grad, dtype=np.float64)
        if not np.isfinite(self.grad).all():
            raise SimulationError(f"worker {self.worker_id}: non-finite gradient push")


@dataclass(frozen=True)
class AggregationRecord:
    """Log row for one loss-weighted aggregation."""

    worker_id: int
    loss_temp: float
    loss_before: float
    loss_after: float
    w1: float
    w2: float


def sync_aggregate(w: Array, grads: Sequence[Array], eta: float) -> Array:
    """One barrier round: w - eta * mean(grads)."""
    if len(grads) < 1:
        raise SimulationError("sync_aggregate needs at least one gradient")
    for g in grads:
        if g.shape != w.shape:
            raise SimulationError("gradient length mismatch in sync_aggregate")
    return w - eta * (np.sum(grads, axis=0) / len(grads))


def async_apply(w: Array, g: Array, eta: float) -> Array:
    """Apply one gradient immediately, in arrival order."""
    if g.shape != w.shape:
        raise SimulationError("gradient length mismatch in async_apply")
    return w - eta * g


def initial_push(
    state: GlobalState, push: WorkerPush, evaluate_loss: Callable[[Array], float]
) -> AggregationRecord:
    """First push ever: adopt the worker's cumulative gradient wholesale."""
    if state.initialized:
        raise SimulationError("initial_push called on an initialized state")
    state.sigma_acc = push.grad.copy()
    state.loss = float(evaluate_loss(state.weights))
    state.initialized = True
    return AggregationRecord(
        worker_id=push.worker_id,
        loss_temp=state.loss,
        loss_before=float("nan"),
        loss_after=state.loss,
        w1=0.0,
        w2=1.0,
    )


def loss_weighted_aggregate(
    state: GlobalState,
    push: WorkerPush,
    evaluate_loss: Callable[[Array], float],
    loss_floor: float = LOSS_FLOOR,
) -> AggregationRecord:
    """Blend the push into sigma_acc with reciprocal-loss weights.

    The worker's cumulative gradient G implies a candidate model
    w_temp = w0 - eta * G; its test loss and the current global loss set the
    weights W2 = 1/L_temp and W1 = 1/L (clamped at loss_floor before the
    reciprocal so a near-zero loss cannot produce an unbounded weight).
    """
    if not state.initialized:
        raise SimulationError("loss_weighted_aggregate before initial_push")
    if push.grad.shape != state.sigma_acc.shape:
        raise SimulationError("gradient length mismatch in loss_weighted_aggregate")
    w_temp = state.w0 - state.eta * push.grad
    loss_temp = float(evaluate_loss(w_temp))
    loss_before = state.loss
    w1 = 1.0 / max(loss_before, loss_floor)
    w2 = 1.0 / max(loss_temp, loss_floor)
    state.sigma_acc = (w1 * state.sigma_acc + w2 * push.grad) / (w1 + w2)
    state.loss = float(evaluate_loss(state.weights))
    return AggregationRecord(
        worker_id=push.worker_id,
        loss_temp=loss_temp,
        loss_before=loss_before,
        loss_after=state.loss,
        w1=w1,
        w2=w2,
    )


def refresh_worker(state: GlobalState) -> tuple[Array, Array]:
    """What the PS sends back after a push: (global weights, sigma_acc copy).

    A worker that adopts the copy as its local cumulative gradient keeps the
    ``local weights == w0 - eta * G`` bookkeeping exact.
    """
    return state.weights, state.sigma_acc.copy()
