"""Dense feed-forward classifiers with analytic gradients.

Two shapes are supported: plain softmax regression (``hidden_dim == 0``) and
a one-hidden-layer ReLU MLP. Parameters and gradients live in flat float64
vectors so the rest of the simulator can treat models as plain arrays and
combine them with ordinary arithmetic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

Array = np.ndarray

# softmax probabilities are clamped to [PROB_FLOOR, 1] before the log so a
# saturated output cannot produce an infinite loss
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class ModelArch:
    """Network shape; ``hidden_dim == 0`` selects softmax regression."""

    input_dim: int
    hidden_dim: int
    num_classes: int
    activation: str = "relu"

    def __post_init__(self):
        if self.input_dim < 1:
            raise ConfigurationError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.hidden_dim < 0:
            raise ConfigurationError(f"hidden_dim must be >= 0, got {self.hidden_dim}")
        if self.activation != "relu":
            raise ConfigurationError(f"unsupported activation {self.activation!r}")

    @property
    def param_count(self) -> int:
        if self.hidden_dim > 0:
            return (
                self.input_dim * self.hidden_dim
                + self.hidden_dim
                + self.hidden_dim * self.num_classes
                + self.num_classes
            )
        return self.input_dim * self.num_classes + self.num_classes


@dataclass
class Batch:
    """A mini-batch: features (n x input_dim) and integer class labels (n)."""

    features: Array
    labels: Array

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ConfigurationError("batch features must be a 2-d matrix")
        if self.labels.ndim != 1 or len(self.labels) != len(self.features):
            raise ConfigurationError("labels must be 1-d and match the feature rows")
        if len(self.features) < 1:
            raise ConfigurationError("batch must contain at least one sample")

    @property
    def n(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class EvalReport:
    """Mean cross-entropy (nats) and top-1 accuracy over one batch."""

    mean_loss: float
    accuracy: float


def _check_batch(batch: Batch, arch: ModelArch) -> None:
    if batch.features.shape[1] != arch.input_dim:
        raise ConfigurationError(
            f"feature dim {batch.features.shape[1]} != arch input_dim {arch.input_dim}"
        )
    if batch.labels.min() < 0 or batch.labels.max() >= arch.num_classes:
        raise ConfigurationError("labels out of range for arch.num_classes")


def _check_params(params: Array, arch: ModelArch) -> Array:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (arch.param_count,):
        raise ConfigurationError(
            f"param vector length {params.shape} != expected ({arch.param_count},)"
        )
    return params


def layer_views(params: Array, arch: ModelArch):
    """Reshaped views into the flat vector, in layout order.

    Softmax regression: (W, b). MLP: (W1, b1, W2, b2).
    """
    d, h, k = arch.input_dim, arch.hidden_dim, arch.num_classes
    if h == 0:
        w = params[: d * k].reshape(d, k)
        b = params[d * k :]
        return w, b
    o1 = d * h
    o2 = o1 + h
    o3 = o2 + h * k
    return (
        params[:o1].reshape(d, h),
        params[o1:o2],
        params[o2:o3].reshape(h, k),
        params[o3:],
    )


def init_params(arch: ModelArch, seed: int) -> Array:
    """Glorot-uniform weights, zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    params = np.zeros(arch.param_count, dtype=np.float64)
    d, h, k = arch.input_dim, arch.hidden_dim, arch.num_classes
    if h == 0:
        w, _ = layer_views(params, arch)
        bound = np.sqrt(6.0 / (d + k))
        w[:] = rng.uniform(-bound, bound, size=w.shape)
    else:
        w1, _, w2, _ = layer_views(params, arch)
        bound1 = np.sqrt(6.0 / (d + h))
        w1[:] = rng.uniform(-bound1, bound1, size=w1.shape)
        bound2 = np.sqrt(6.0 / (h + k))
        w2[:] = rng.uniform(-bound2, bound2, size=w2.shape)
    return params


def _forward(params: Array, x: Array, arch: ModelArch):
    """Returns (probs, pre-activation z1 or None, hidden activation or None)."""
    if arch.hidden_dim == 0:
        w, b = layer_views(params, arch)
        logits = x @ w + b
        z1 = a1 = None
    else:
        w1, b1, w2, b2 = layer_views(params, arch)
        z1 = x @ w1 + b1
        a1 = np.maximum(z1, 0.0)
        logits = a1 @ w2 + b2
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    probs = expd / expd.sum(axis=1, keepdims=True)
    return probs, z1, a1


def forward_eval(params: Array, batch: Batch, arch: ModelArch) -> EvalReport:
    """Mean cross-entropy and accuracy; argmax ties go to the lowest class."""
    params = _check_params(params, arch)
    _check_batch(batch, arch)
    probs, _, _ = _forward(params, batch.features, arch)
    picked = probs[np.arange(batch.n), batch.labels]
    loss = float(-np.mean(np.log(np.clip(picked, PROB_FLOOR, 1.0))))
    acc = float(np.mean(np.argmax(probs, axis=1) == batch.labels))
    return EvalReport(mean_loss=loss, accuracy=acc)


def backward(params: Array, batch: Batch, arch: ModelArch) -> Array:
    """Analytic gradient of the mean cross-entropy w.r.t. all parameters."""
    params = _check_params(params, arch)
    _check_batch(batch, arch)
    x = batch.features
    probs, z1, a1 = _forward(params, x, arch)
    dlogits = probs.copy()
    dlogits[np.arange(batch.n), batch.labels] -= 1.0
    dlogits /= batch.n
    grad = np.empty_like(params)
    if arch.hidden_dim == 0:
        gw, gb = layer_views(grad, arch)
        gw[:] = x.T @ dlogits
        gb[:] = dlogits.sum(axis=0)
    else:
        _, _, w2, _ = layer_views(params, arch)
        gw1, gb1, gw2, gb2 = layer_views(grad, arch)
        gw2[:] = a1.T @ dlogits
        gb2[:] = dlogits.sum(axis=0)
        dz1 = (dlogits @ w2.T) * (z1 > 0)
        gw1[:] = x.T @ dz1
        gb1[:] = dz1.sum(axis=0)
    return grad


def sgd_step(params: Array, grad: Array, eta: float) -> Array:
    """One descent step ``w - eta * g``; returns a new vector."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise ConfigurationError("params and grad lengths differ")
    return params - eta * grad


def momentum_step(
    params: Array, grad: Array, velocity: Array, eta: float, momentum: float = 0.9
):
    """Classical-momentum step; returns (new_params, new_velocity)."""
    if params.shape != grad.shape or params.shape != velocity.shape:
        raise ConfigurationError("params, grad and velocity lengths differ")
    new_v = momentum * velocity + grad
    return params - eta * new_v, new_v


def one_hot(labels: Array, num_classes: int) -> Array:
    out = np.zeros((len(labels), num_classes), dtype=np.float64)
    out[np.arange(len(labels)), labels] = 1.0
    return out
