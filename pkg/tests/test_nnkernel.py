from __future__ import annotations

import math

import numpy as np
import pytest

from edgedml.errors import ConfigurationError
from edgedml.nnkernel import (
    Batch,
    ModelArch,
    backward,
    forward_eval,
    init_params,
    layer_views,
    momentum_step,
    one_hot,
    sgd_step,
)


def finite_difference_grad(params, batch, arch, h=1e-5):
    """Central-difference gradient of the evaluated mean loss (oracle)."""
    fd = np.zeros_like(params)
    for i in range(len(params)):
        hi, lo = params.copy(), params.copy()
        hi[i] += h
        lo[i] -= h
        fd[i] = (
            forward_eval(hi, batch, arch).mean_loss - forward_eval(lo, batch, arch).mean_loss
        ) / (2 * h)
    return fd


def max_relative_gap(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8)


def random_instance(seed, arch, n=8):
    rng = np.random.default_rng(seed)
    params = init_params(arch, seed) + rng.normal(0.0, 0.3, arch.param_count)
    batch = Batch(rng.normal(0.0, 1.0, (n, arch.input_dim)), rng.integers(0, arch.num_classes, n))
    return params, batch


def test_param_count_formulas():
    assert ModelArch(4, 0, 3).param_count == 15
    assert ModelArch(784, 32, 10).param_count == 784 * 32 + 32 + 32 * 10 + 10 == 25450
    assert ModelArch(6, 4, 3).param_count == 6 * 4 + 4 + 4 * 3 + 3


def test_arch_validation():
    with pytest.raises(ConfigurationError):
        ModelArch(0, 0, 3)
    with pytest.raises(ConfigurationError):
        ModelArch(4, 0, 1)
    with pytest.raises(ConfigurationError):
        ModelArch(4, 2, 3, activation="tanh")


def test_init_params_softmax_biases_zero():
    arch = ModelArch(4, 0, 3)
    params = init_params(arch, 7)
    assert params.shape == (15,)
    assert np.all(params[12:] == 0.0)  # bias segment
    bound = math.sqrt(6.0 / (4 + 3))
    assert np.all(np.abs(params[:12]) <= bound)


def test_init_params_deterministic():
    arch = ModelArch(9, 5, 4)
    assert np.array_equal(init_params(arch, 3), init_params(arch, 3))
    assert not np.array_equal(init_params(arch, 3), init_params(arch, 4))


def test_init_params_mlp_layout():
    arch = ModelArch(784, 32, 10)
    params = init_params(arch, 0)
    assert params.shape == (25450,)
    w1, b1, w2, b2 = layer_views(params, arch)
    assert w1.shape == (784, 32) and w2.shape == (32, 10)
    assert np.all(b1 == 0.0) and np.all(b2 == 0.0)


def test_forward_eval_uniform_softmax_is_log_k():
    for k in (2, 3, 10):
        arch = ModelArch(5, 0, k)
        batch = Batch(np.random.default_rng(0).normal(size=(6, 5)), np.zeros(6, dtype=int))
        report = forward_eval(np.zeros(arch.param_count), batch, arch)
        assert report.mean_loss == pytest.approx(math.log(k), abs=1e-12)


def test_forward_eval_saturated_prob_near_zero_loss():
    arch = ModelArch(2, 0, 2)
    params = np.zeros(arch.param_count)
    w, b = layer_views(params, arch)
    b[0] = 60.0  # softmax prob of class 0 -> 1 within float precision
    report = forward_eval(params, Batch([[0.0, 0.0]], [0]), arch)
    assert report.mean_loss == pytest.approx(0.0, abs=1e-9)
    assert report.accuracy == 1.0


def test_forward_eval_tie_breaks_to_lowest_class():
    arch = ModelArch(3, 0, 2)
    batch = Batch(np.ones((4, 3)), np.array([0, 0, 1, 1]))
    report = forward_eval(np.zeros(arch.param_count), batch, arch)
    # logits are (0, 0) for every sample; predicted class is 0
    assert report.accuracy == 0.5


def test_forward_eval_dimension_mismatch():
    arch = ModelArch(3, 0, 2)
    with pytest.raises(ConfigurationError):
        forward_eval(np.zeros(arch.param_count), Batch(np.ones((2, 4)), [0, 1]), arch)
    with pytest.raises(ConfigurationError):
        forward_eval(np.zeros(5), Batch(np.ones((2, 3)), [0, 1]), arch)
    with pytest.raises(ConfigurationError):
        forward_eval(np.zeros(arch.param_count), Batch(np.ones((2, 3)), [0, 2]), arch)


def test_backward_matches_finite_differences_mlp():
    arch = ModelArch(6, 4, 3)
    params, batch = random_instance(0, arch)
    gap = max_relative_gap(backward(params, batch, arch), finite_difference_grad(params, batch, arch))
    assert gap < 1e-4


@pytest.mark.parametrize("seed", range(12))
@pytest.mark.parametrize("hidden", [0, 4])
def test_backward_matches_finite_differences_randomized(seed, hidden):
    arch = ModelArch(5, hidden, 3)
    params, batch = random_instance(100 + seed, arch, n=6)
    gap = max_relative_gap(backward(params, batch, arch), finite_difference_grad(params, batch, arch))
    assert gap < 1e-4


def test_backward_mean_invariance_under_duplication():
    arch = ModelArch(4, 3, 2)
    params, batch = random_instance(5, arch, n=5)
    doubled = Batch(np.vstack([batch.features] * 2), np.concatenate([batch.labels] * 2))
    assert np.allclose(backward(params, batch, arch), backward(params, doubled, arch), atol=1e-12)


def test_backward_zero_input_softmax_closed_form():
    arch = ModelArch(3, 0, 4)
    rng = np.random.default_rng(2)
    params = rng.normal(size=arch.param_count)
    labels = np.array([0, 1, 3, 3, 2])
    batch = Batch(np.zeros((5, 3)), labels)
    grad = backward(params, batch, arch)
    gw, gb = layer_views(grad, arch)
    assert np.allclose(gw, 0.0, atol=1e-15)
    _, b = layer_views(params, arch)
    probs = np.exp(b - b.max())
    probs /= probs.sum()
    expected = probs - one_hot(labels, 4).mean(axis=0)
    assert np.allclose(gb, expected, atol=1e-12)


def test_loss_permutation_and_concat_properties():
    arch = ModelArch(4, 3, 3)
    params, batch = random_instance(9, arch, n=10)
    perm = np.random.default_rng(1).permutation(10)
    shuffled = Batch(batch.features[perm], batch.labels[perm])
    assert forward_eval(params, batch, arch).mean_loss == pytest.approx(
        forward_eval(params, shuffled, arch).mean_loss, rel=1e-12
    )
    a = Batch(batch.features[:4], batch.labels[:4])
    b = Batch(batch.features[4:], batch.labels[4:])
    la = forward_eval(params, a, arch).mean_loss
    lb = forward_eval(params, b, arch).mean_loss
    combined = forward_eval(params, batch, arch).mean_loss
    assert combined == pytest.approx((4 * la + 6 * lb) / 10, rel=1e-12)


def test_sgd_step_arithmetic():
    out = sgd_step(np.array([1.0, 1.0]), np.array([1.0, -1.0]), 0.1)
    assert np.allclose(out, [0.9, 1.1], atol=1e-15)


def test_sgd_step_zero_gradient_identity():
    w = np.array([0.4, -2.0, 3.0])
    assert np.array_equal(sgd_step(w, np.zeros(3), 0.5), w)


def test_sgd_step_linear_in_eta():
    w = np.array([1.0, 2.0])
    g = np.array([0.3, -0.7])
    twice = sgd_step(sgd_step(w, g, 0.05), g, 0.05)
    assert np.allclose(twice, sgd_step(w, g, 0.1), atol=1e-12)


def test_sgd_step_length_mismatch():
    with pytest.raises(ConfigurationError):
        sgd_step(np.zeros(3), np.zeros(4), 0.1)


def test_momentum_step_accumulates_velocity():
    w = np.zeros(2)
    v = np.zeros(2)
    g = np.array([1.0, -1.0])
    w, v = momentum_step(w, g, v, eta=0.1, momentum=0.9)
    assert np.allclose(v, g) and np.allclose(w, [-0.1, 0.1])
    w, v = momentum_step(w, g, v, eta=0.1, momentum=0.9)
    assert np.allclose(v, [1.9, -1.9]) and np.allclose(w, [-0.29, 0.29])
