"""Significance gate over a sliding window of recent test losses.

Each worker keeps the last ``capacity`` test losses in a FIFO. Once the window
is full, the current loss x is standardized against the window
(z = (x - mu) / sigma, population sigma) and gradients are pushed only when
z falls at or below the negative threshold alpha -- i.e. when the loss is a
statistically unusual improvement over recent history. Quiet stretches of
``lam`` iterations decay alpha toward zero by the factor (1 - beta), so the
gate gradually loosens as the local model flattens out near convergence.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

from .errors import ConfigurationError, InsufficientDataError

SIGMA_FLOOR = 1e-12


@dataclass
class LossWindow:
    """Gate state for one worker: the loss FIFO plus (alpha, beta, lam, n_iter)."""

    capacity: int
    alpha: float
    beta: float
    lam: int
    alpha_reset_on_push: bool = False
    losses: deque = field(init=False)
    alpha_initial: float = field(init=False)
    n_iter: int = 0

    def __post_init__(self):
        if self.capacity < 1:
            raise ConfigurationError("window capacity must be >= 1")
        if self.alpha >= 0:
            raise ConfigurationError(f"alpha must be negative, got {self.alpha}")
        if not 0.0 < self.beta < 1.0:
            raise ConfigurationError(f"beta must lie in (0, 1), got {self.beta}")
        if self.lam < 1:
            raise ConfigurationError(f"lam must be >= 1, got {self.lam}")
        self.losses = deque(maxlen=self.capacity)
        self.alpha_initial = self.alpha

    @property
    def is_full(self) -> bool:
        return len(self.losses) == self.capacity


@dataclass(frozen=True)
class GateEvent:
    """Outcome of one gate evaluation (records the post-decision alpha)."""

    pushed: bool
    warmup: bool
    z: float | None
    mu: float | None
    sigma: float | None
    alpha: float
    n_iter: int


def window_stats(win: LossWindow) -> tuple[float, float]:
    """Mean and population standard deviation of the stored losses.

    The current loss is never part of the window when this runs; raises
    InsufficientDataError until the window has filled once.
    """
    if not win.is_full:
        raise InsufficientDataError(
            f"window holds {len(win.losses)}/{win.capacity} losses; gate not ready"
        )
    mu = sum(win.losses) / win.capacity
    var = sum((x - mu) ** 2 for x in win.losses) / win.capacity
    return mu, math.sqrt(var)


def zscore(x: float, mu: float, sigma: float) -> float:
    if sigma <= 0:
        raise ConfigurationError("zscore requires sigma > 0")
    return (x - mu) / sigma


def decay_alpha(win: LossWindow) -> float:
    """alpha <- alpha * (1 - beta); magnitude shrinks, sign stays negative."""
    win.alpha *= 1.0 - win.beta
    return win.alpha


def should_push(win: LossWindow, x: float) -> GateEvent:
    """Evaluate one test loss against the window and update gate state.

    Warm-up (window not yet full): enqueue and hold, n_iter untouched.
    Otherwise push iff z <= alpha with sigma above the degenerate floor; a
    push zeroes n_iter, a hold increments it, and once n_iter reaches lam the
    same iteration already applies the alpha decay. x is enqueued last, after
    the decision, evicting the oldest loss.
    """
    if not win.is_full:
        win.losses.append(x)
        return GateEvent(False, True, None, None, None, win.alpha, win.n_iter)
    mu, sigma = window_stats(win)
    z = zscore(x, mu, sigma) if sigma > SIGMA_FLOOR else None
    pushed = z is not None and z <= win.alpha
    if pushed:
        win.n_iter = 0
        if win.alpha_reset_on_push:
            win.alpha = win.alpha_initial
    else:
        win.n_iter += 1
    if win.n_iter >= win.lam:
        decay_alpha(win)
    win.losses.append(x)
    return GateEvent(pushed, False, z, mu, sigma, win.alpha, win.n_iter)


def tail_probability(z: float) -> float:
    """Standard normal CDF Phi(z): the mass at or below a given z-score."""
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


def replay(
    losses,
    capacity: int,
    alpha: float,
    beta: float,
    lam: int,
    alpha_reset_on_push: bool = False,
) -> list[GateEvent]:
    """Run the gate over a recorded loss stream; returns one event per loss."""
    win = LossWindow(capacity, alpha, beta, lam, alpha_reset_on_push)
    return [should_push(win, float(x)) for x in losses]
