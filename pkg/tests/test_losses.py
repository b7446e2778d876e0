import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixseg.core import make_rng, one_hot
from mixseg.losses import combined_loss, confidence_gate, supervised_ce, unsupervised_ce
from mixseg.model import softmax
from gradcheck import central_difference, gradcheck_instances, max_relative_error


def brute_ce(pred, target, gate=None, normalize="all"):
    """Direct double sum over pixels and classes, with the 1e-12 clamp."""
    n, c, h, w = pred.shape
    total, count = 0.0, 0.0
    for b in range(n):
        for i in range(h):
            for j in range(w):
                g = 1.0 if gate is None else float(gate[b, i, j])
                count += g
                for k in range(c):
                    y = 1.0 if target[b, i, j] == k else 0.0
                    total -= g * y * math.log(max(pred[b, k, i, j], 1e-12))
    norm = n * h * w if normalize == "all" else count
    return 0.0 if count == 0 else total / norm


def test_perfect_prediction_is_zero_loss():
    y = np.array([[[0, 1], [1, 0]]])
    loss, grad = supervised_ce(one_hot(y, 2), y)
    assert loss == 0.0 and np.all(grad == 0)


def test_uniform_prediction_is_log_c():
    y = make_rng(0).integers(0, 5, (2, 3, 3))
    loss, _ = supervised_ce(np.full((2, 5, 3, 3), 0.2), y)
    assert loss == pytest.approx(math.log(5), rel=1e-12)


def test_supervised_matches_direct_sum():
    rng = make_rng(1)
    pred = softmax(rng.normal(size=(1, 2, 2, 2)))
    y = rng.integers(0, 2, (1, 2, 2))
    assert supervised_ce(pred, y)[0] == pytest.approx(brute_ce(pred, y), rel=1e-12)


def test_unbatched_input_shape_kept():
    pred = softmax(make_rng(2).normal(size=(3, 4, 4)))
    y = np.zeros((4, 4), dtype=int)
    loss, grad = supervised_ce(pred, y)
    assert grad.shape == pred.shape
    assert loss == pytest.approx(supervised_ce(pred[None], y[None])[0])


def test_gate_all_ones_reduces_to_supervised():
    rng = make_rng(3)
    pred = softmax(rng.normal(size=(2, 3, 4, 4)))
    y = rng.integers(0, 3, (2, 4, 4))
    ones = np.ones((2, 4, 4))
    s_loss, s_grad = supervised_ce(pred, y)
    for mode in ("gated", "all"):
        u_loss, u_grad = unsupervised_ce(pred, y, ones, normalize=mode)
        assert u_loss == pytest.approx(s_loss, rel=1e-12)
        assert np.allclose(u_grad, s_grad, rtol=1e-12, atol=0)


def test_gate_all_zeros():
    pred = softmax(make_rng(4).normal(size=(1, 2, 3, 3)))
    loss, grad = unsupervised_ce(pred, np.zeros((1, 3, 3), int), np.zeros((1, 3, 3)))
    assert loss == 0.0 and np.all(grad == 0)


@pytest.mark.parametrize("mode", ["gated", "all"])
def test_half_gated_matches_direct_sum(mode):
    rng = make_rng(5)
    pred = softmax(rng.normal(size=(1, 2, 2, 2)))
    y = rng.integers(0, 2, (1, 2, 2))
    gate = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    loss, grad = unsupervised_ce(pred, y, gate, normalize=mode)
    assert loss == pytest.approx(brute_ce(pred, y, gate, mode), rel=1e-12)
    assert np.all(grad[0, :, 0, 1] == 0) and np.all(grad[0, :, 1, 0] == 0)


@pytest.mark.parametrize("mode", ["gated", "all"])
def test_loss_gradients_wrt_logits(mode):
    rng = make_rng(6)
    logits = rng.normal(size=(2, 3, 3, 3))
    y = rng.integers(0, 3, (2, 3, 3))
    gate = (rng.random((2, 3, 3)) > 0.4).astype(float)
    _, g_sup = supervised_ce(softmax(logits), y)
    _, g_uns = unsupervised_ce(softmax(logits), y, gate, normalize=mode)
    assert max_relative_error(g_sup, central_difference(lambda: supervised_ce(softmax(logits), y)[0], logits)) < 1e-4
    num = central_difference(lambda: unsupervised_ce(softmax(logits), y, gate, normalize=mode)[0], logits)
    assert max_relative_error(g_uns, num) < 1e-4


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32))
def test_supervised_nonnegative(seed):
    rng = make_rng(seed)
    pred = softmax(rng.normal(size=(1, 3, 2, 2)) * 10)
    assert supervised_ce(pred, rng.integers(0, 3, (1, 2, 2)))[0] >= 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32))
def test_gate_monotone_unnormalized(seed):
    rng = make_rng(seed)
    pred = softmax(rng.normal(size=(1, 3, 3, 3)))
    y = rng.integers(0, 3, (1, 3, 3))
    gate = (rng.random((1, 3, 3)) > 0.5).astype(float)
    i, j = rng.integers(0, 3, 2)
    more = gate.copy()
    more[0, i, j] = 1.0
    # "all" mode has a fixed normalizer, so it tracks the raw sum
    assert unsupervised_ce(pred, y, more, "all")[0] >= unsupervised_ce(pred, y, gate, "all")[0]


def test_saturated_wrong_prediction_is_finite():
    pred = np.array([1.0, 0.0]).reshape(1, 2, 1, 1)
    loss, _ = supervised_ce(pred, np.array([[[1]]]))
    assert loss == pytest.approx(-math.log(1e-12))


def test_combined_loss():
    assert combined_loss(1.5, 9.0, 0.0) == 1.5
    assert combined_loss(1.0, 2.0, 0.5) == 2.0
    with pytest.raises(ValueError):
        combined_loss(1.0, 1.0, -0.1)


def test_combined_gradient_linearity():
    rng = make_rng(7)
    logits = rng.normal(size=(1, 2, 2, 2))
    y = rng.integers(0, 2, (1, 2, 2))
    u = rng.integers(0, 2, (1, 2, 2))
    gate = np.ones((1, 2, 2))
    lam = 0.5
    _, gs = supervised_ce(softmax(logits), y)
    _, gu = unsupervised_ce(softmax(logits), u, gate)
    total = lambda: combined_loss(supervised_ce(softmax(logits), y)[0], unsupervised_ce(softmax(logits), u, gate)[0], lam)
    assert max_relative_error(gs + lam * gu, central_difference(total, logits)) < 1e-4


def test_confidence_gate():
    rng = make_rng(8)
    probs = softmax(rng.normal(size=(4, 5, 5)))
    assert np.all(confidence_gate(probs, 0.25) == 1)
    y = rng.integers(0, 4, (5, 5))
    assert np.all(confidence_gate(one_hot(y, 4), 0.99) == 1)
    assert confidence_gate(np.array([0.9, 0.1]).reshape(2, 1, 1), 0.95)[0, 0] == 0
    assert confidence_gate(np.array([0.95, 0.05]).reshape(2, 1, 1), 0.95)[0, 0] == 1
    with pytest.raises(ValueError):
        confidence_gate(probs, 0.0)


@pytest.mark.parametrize("instance", gradcheck_instances(3, margin=1e-3), ids=lambda t: f"seed{t[0]}")
def test_unsupervised_loss_through_network(instance):
    _, net, params, images, rng = instance
    pseudo = rng.integers(0, 2, (2, 4, 4))
    gate = (rng.random((2, 4, 4)) > 0.5).astype(float)

    def loss():
        logits = np.stack([net.forward(params, img)[0] for img in images])
        return unsupervised_ce(softmax(logits), pseudo, gate)[0]

    params.zero_grad()
    logits, caches = zip(*(net.forward(params, img) for img in images))
    _, g = unsupervised_ce(softmax(np.stack(logits)), pseudo, gate)
    for gi, cache in zip(g, caches):
        net.backward(params, cache, gi)
    for name, value in params.values.items():
        assert max_relative_error(params.grads[name], central_difference(loss, value)) < 1e-4, name
