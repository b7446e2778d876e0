import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixseg.core import check_probs, make_rng
from mixseg.losses import supervised_ce
from mixseg.model import (ModelParams, ReferenceNet, TrainingDivergence, load_checkpoint, poly_lr,
                          save_checkpoint, sgd_step, softmax)
from gradcheck import central_difference, gradcheck_instances, max_relative_error


def test_zero_params_give_uniform_softmax():
    net = ReferenceNet(4)
    logits, _ = net.forward(net.zero_params(), np.full((3, 5, 5), 0.5))
    assert np.all(logits == 0)
    assert np.allclose(softmax(logits), 0.25)


def test_output_resolution():
    net = ReferenceNet(4)
    logits, _ = net.forward(net.init_params(make_rng(0)), make_rng(1).random((3, 32, 32)))
    assert logits.shape == (4, 32, 32)
    with pytest.raises(ValueError):
        net.forward(net.zero_params(), np.zeros((1, 4, 4)))


def test_single_pixel_hand_computed():
    # 1x1 image: only the centre tap of each 3x3 kernel sees data.
    net = ReferenceNet(2, width=2)
    p = net.zero_params()
    v = p.values
    v["conv1.w"][0, :, 1, 1] = [1.0, 2.0, 3.0]
    v["conv1.w"][1, :, 1, 1] = [-1.0, 0.0, 0.0]
    v["conv1.b"][:] = [0.5, 0.25]
    v["conv2.w"][0, 0, 1, 1] = 2.0
    v["conv2.w"][1, 0, 1, 1] = -1.0
    v["conv2.w"][1, 1, 1, 1] = 4.0
    v["conv2.b"][:] = [-1.0, 3.0]
    v["conv3.w"][:, :, 0, 0] = [[1.0, 1.0], [0.5, -2.0]]
    v["conv3.b"][:] = [0.0, 1.0]
    x = np.array([0.1, 0.2, 0.3]).reshape(3, 1, 1)
    # layer 1: [0.1 + 0.4 + 0.9 + 0.5, -0.1 + 0.25] = [1.9, 0.15]
    # layer 2: [2*1.9 - 1, -1.9 + 4*0.15 + 3] = [2.8, 1.7]
    # layer 3: [2.8 + 1.7, 1.4 - 3.4 + 1] = [4.5, -1.0]
    logits, _ = net.forward(p, x)
    assert np.allclose(logits.ravel(), [4.5, -1.0])


def test_softmax_properties():
    assert np.allclose(softmax(np.zeros((2, 1, 1))).ravel(), [0.5, 0.5])
    z = make_rng(0).normal(size=(3, 2, 2))
    assert np.allclose(softmax(z), softmax(z + 7.5))
    big = softmax(np.array([1000.0, 0.0]).reshape(2, 1, 1))
    assert np.all(np.isfinite(big)) and big[0, 0, 0] == 1.0 and big[1, 0, 0] < 1e-300


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.floats(1.0, 1e3))
def test_softmax_is_valid_probmap(seed, scale):
    check_probs(softmax(make_rng(seed).normal(size=(5, 3, 3)) * scale))


def _loss_and_grads(net, params, images, labels):
    params.zero_grad()
    logits, caches = zip(*(net.forward(params, img) for img in images))
    loss, g = supervised_ce(softmax(np.stack(logits)), labels)
    for gi, cache in zip(g, caches):
        net.backward(params, cache, gi)
    return loss


@pytest.mark.parametrize("instance", gradcheck_instances(3, margin=1e-3), ids=lambda t: f"seed{t[0]}")
def test_backward_matches_finite_differences(instance):
    _, net, params, images, rng = instance
    labels = rng.integers(0, 2, (2, 4, 4))
    _loss_and_grads(net, params, images, labels)
    analytic = {k: g.copy() for k, g in params.grads.items()}

    def loss():
        logits = np.stack([net.forward(params, img)[0] for img in images])
        return supervised_ce(softmax(logits), labels)[0]

    for name, value in params.values.items():
        numeric = central_difference(loss, value)
        assert max_relative_error(analytic[name], numeric) < 1e-4, name


def test_backward_zero_and_linear():
    rng = make_rng(4)
    net = ReferenceNet(3, width=4)
    params = net.init_params(rng)
    img = rng.random((3, 5, 5))
    logits, cache = net.forward(params, img)
    net.backward(params, cache, np.zeros_like(logits))
    assert all(np.all(g == 0) for g in params.grads.values())
    g = rng.normal(size=logits.shape)
    net.backward(params, cache, g)
    once = {k: v.copy() for k, v in params.grads.items()}
    params.zero_grad()
    net.backward(params, cache, 2 * g)
    for k in once:
        assert np.allclose(params.grads[k], 2 * once[k], rtol=1e-12, atol=1e-15)
    with pytest.raises(ValueError):
        net.backward(params, cache, np.zeros((3, 4, 4)))


def test_forward_deterministic():
    net = ReferenceNet(4)
    params = net.init_params(make_rng(0))
    img = make_rng(1).random((3, 16, 16))
    assert np.array_equal(net.forward(params, img)[0], net.forward(params, img)[0])


def test_forward_reports_divergence():
    net = ReferenceNet(2, width=2)
    params = net.zero_params()
    params.values["conv3.b"][0] = np.inf
    with pytest.raises(TrainingDivergence):
        net.forward(params, np.zeros((3, 2, 2)))


def _single(w=1.0, grad=0.5):
    p = ModelParams({"layer.w": np.array([w]), "layer.b": np.array([w])})
    p.grads["layer.w"][:] = grad
    p.grads["layer.b"][:] = grad
    return p


def test_sgd_arithmetic():
    p = _single()
    sgd_step(p, 0.1, 0.0, 0.0)
    assert p.values["layer.w"][0] == pytest.approx(0.95)
    assert p.grads["layer.w"][0] == 0.0


def test_sgd_momentum_recurrence():
    p = _single(grad=0.3)
    sgd_step(p, 0.0, 0.9, 0.0)
    p.grads["layer.w"][:] = 0.3
    sgd_step(p, 0.0, 0.9, 0.0)
    assert p.velocity["layer.w"][0] == pytest.approx(1.9 * 0.3)


def test_sgd_decay_skips_biases():
    p = _single(w=2.0, grad=0.0)
    sgd_step(p, 1.0, 0.0, 0.1)
    assert p.values["layer.w"][0] == pytest.approx(1.8)
    assert p.values["layer.b"][0] == 2.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32))
def test_sgd_zero_lr_is_noop(seed):
    rng = make_rng(seed)
    net = ReferenceNet(3, width=2)
    p = net.init_params(rng)
    before = p.copy()
    for g in p.grads.values():
        g[:] = rng.normal(size=g.shape)
    sgd_step(p, 0.0, 0.9, 5e-4)
    assert all(np.array_equal(p.values[k], before.values[k]) for k in p.values)


def test_sgd_nonfinite_update():
    p = _single(grad=np.nan)
    with pytest.raises(TrainingDivergence):
        sgd_step(p, 0.1, 0.9, 0.0)


def test_poly_lr():
    assert poly_lr(0, 100, 2.5e-4, 0.9) == 2.5e-4
    assert poly_lr(100, 100, 2.5e-4, 0.9) == 0.0
    assert poly_lr(50, 100, 1.0, 1.0) == 0.5
    with pytest.raises(ValueError):
        poly_lr(101, 100, 1.0)


def test_checkpoint_roundtrip(tmp_path):
    net = ReferenceNet(4)
    params = net.init_params(make_rng(0))
    path = tmp_path / "model.ckpt"
    save_checkpoint(params, path)
    raw = path.read_bytes()
    assert raw.startswith(b"MIXSEG-CKPT 1\nconv1.w 16 3 3 3\n")
    loaded = load_checkpoint(path)
    assert loaded.names() == params.names()
    for k in params.values:
        assert loaded.values[k].tobytes() == params.values[k].tobytes()
    save_checkpoint(loaded, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == raw


def test_checkpoint_truncated(tmp_path):
    net = ReferenceNet(2, width=2)
    path = tmp_path / "model.ckpt"
    save_checkpoint(net.init_params(make_rng(0)), path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ValueError):
        load_checkpoint(path)
