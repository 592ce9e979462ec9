import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fdcheck import probe, rel_err
from latentconv.conditioning import ConditionedNet
from latentconv.nnkernel import (
    Adam,
    Dense,
    DenseNet,
    ShapeError,
    TrainingError,
    activate,
    activate_grad,
    adam_step,
    backward,
    eval_conditioned,
)


def identity_net(dim, act="identity"):
    return DenseNet([Dense(np.eye(dim), np.zeros(dim), act)])


def test_forward_identity():
    np.testing.assert_array_equal(identity_net(2).forward(np.array([[1.0, 2.0]])), [[1.0, 2.0]])


def test_forward_leaky_relu():
    out = identity_net(2, "leaky_relu").forward(np.array([[-1.0, 3.0]]))
    np.testing.assert_allclose(out, [[-0.2, 3.0]], rtol=0, atol=1e-15)


def test_mish_zero_is_exact():
    assert activate("mish", np.zeros(1))[0] == 0.0


@given(arrays(np.float64, 20, elements=st.floats(-50, 50)))
def test_leaky_relu_definition(x):
    y = activate("leaky_relu", x)
    np.testing.assert_array_equal(y[x >= 0], x[x >= 0])
    np.testing.assert_array_equal(y[x < 0], 0.2 * x[x < 0])


def test_forward_shape_error():
    with pytest.raises(ShapeError):
        identity_net(3).forward(np.ones((1, 2)))


def test_layers_must_chain():
    with pytest.raises(ShapeError):
        DenseNet([Dense(np.ones((2, 3)), np.zeros(3)), Dense(np.ones((2, 2)), np.zeros(2))])


def test_backward_linear_hand_derived():
    net = DenseNet([Dense(np.array([[3.0]]), np.zeros(1))])
    grads, gx = backward(net, np.array([[2.0]]), np.ones((1, 1)))
    np.testing.assert_array_equal(grads[0], [[2.0]])
    np.testing.assert_array_equal(grads[1], [1.0])
    np.testing.assert_array_equal(gx, [[3.0]])


def test_backward_upstream_shape_error():
    net = identity_net(2)
    with pytest.raises(ShapeError):
        backward(net, np.ones((3, 2)), np.ones((2, 2)))


def test_mish_derivative_at_zero():
    h = 1e-6
    num = (activate("mish", np.array([h])) - activate("mish", np.array([-h])))[0] / (2 * h)
    ana = activate_grad("mish", np.zeros(1), activate("mish", np.zeros(1)))[0]
    assert ana == pytest.approx(0.6, abs=1e-12)  # tanh(log 2) = 3/5
    assert rel_err(ana, num, atol=0) < 1e-6


@pytest.mark.parametrize("act", ["leaky_relu", "mish", "tanh"])
def test_dense_net_grads_match_finite_differences(act):
    rng = np.random.default_rng(1)
    net = DenseNet.mlp(5, 3, hidden=8, depth=3, act=act, rng=rng)
    x = rng.standard_normal((7, 5))
    r = rng.standard_normal((7, 3))

    def loss():
        return float(np.sum(r * net.forward(x)))

    grads, gx = backward(net, x, r)
    assert probe(loss, net.params(), grads, n_probes=120) < 1e-4
    # input gradient
    assert probe(loss, [x], [gx], n_probes=20) < 1e-4


def test_conditioned_net_grads_match_finite_differences():
    rng = np.random.default_rng(2)
    net = ConditionedNet(6, n_speakers=3, speaker_dim=4, content_dim=5, time_dim=8, time_hidden=12, hidden=16, rng=rng)
    x = rng.standard_normal((10, 6))
    t = np.repeat([0.25, 0.7], 5)
    spk = np.repeat([0, 2], 5)
    p = rng.random((10, 5))
    r = rng.standard_normal((10, 6))

    def loss():
        return float(np.sum(r * net.forward(x, t, spk, p)))

    _, cache = net.forward_cache(x, t, spk, p)
    grads, _ = net.backward(cache, r)
    assert len(grads) == len(net.params())
    assert probe(loss, net.params(), grads, n_probes=150) < 1e-4


def test_forward_is_pure():
    rng = np.random.default_rng(3)
    net = DenseNet.mlp(4, 2, hidden=8, rng=rng)
    x = rng.standard_normal((5, 4))
    before = [p.copy() for p in net.params()]
    a, b = net.forward(x), net.forward(x)
    assert a.tobytes() == b.tobytes()
    assert all(np.array_equal(p, q) for p, q in zip(before, net.params()))


def test_adam_zero_gradient_is_fixed_point():
    p = np.array([1.0, -2.0])
    opt = Adam([p], lr=0.1)
    for _ in range(5):
        opt.step([np.zeros(2)])
    np.testing.assert_array_equal(p, [1.0, -2.0])
    np.testing.assert_array_equal(opt.m[0], 0.0)
    assert opt.step_count == 5


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 4, elements=st.floats(-1e3, 1e3)), st.integers(1, 20))
def test_adam_zero_gradient_property(p0, steps):
    p = p0.copy()
    opt = Adam([p], lr=0.05)
    for _ in range(steps):
        opt.step([np.zeros_like(p)])
    np.testing.assert_array_equal(p, p0)


def test_adam_first_step_hand_computed():
    p = np.array([0.0])
    opt = Adam([p], lr=0.1, clip_norm=None)
    adam_step([p], [np.array([1.0])], opt)
    # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    assert p[0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)


def test_adam_reduces_convex_quadratic():
    p = np.array([3.0, -1.0])
    opt = Adam([p], lr=0.1)
    losses = [float(np.sum(p**2))]
    for _ in range(2):
        opt.step([2 * p])
        losses.append(float(np.sum(p**2)))
    assert losses[0] > losses[1] > losses[2]


def test_adam_rejects_non_finite_gradient():
    a, b = np.zeros(2), np.zeros(3)
    opt = Adam([a, b], names=["layer0.w", "layer1.w"])
    with pytest.raises(TrainingError, match="layer1.w"):
        opt.step([np.zeros(2), np.array([0.0, np.nan, 0.0])])


def test_gradient_clipping_caps_global_norm():
    p = np.zeros(1)
    opt = Adam([p], lr=1.0, clip_norm=10.0)
    opt.step([np.array([1e6])])
    # after clipping the first Adam step is still ~lr in magnitude
    assert abs(p[0]) == pytest.approx(1.0, rel=1e-6)


def test_eval_conditioned_zero_conditioning_is_padded_forward():
    rng = np.random.default_rng(4)
    net = DenseNet.mlp(3 + 2 + 2 + 4, 3, hidden=8, rng=rng)
    x = rng.standard_normal((6, 3))
    out = eval_conditioned(net, x, np.zeros(2), np.zeros((6, 2)), np.zeros(4))
    padded = np.concatenate([x, np.zeros((6, 8))], axis=1)
    np.testing.assert_array_equal(out, net.forward(padded))


def test_eval_conditioned_deterministic_and_dim_checked():
    rng = np.random.default_rng(5)
    net = DenseNet.mlp(3 + 2 + 2 + 4, 3, hidden=8, rng=rng)
    args = (rng.standard_normal((6, 3)), rng.standard_normal(2), rng.random((6, 2)), rng.standard_normal(4))
    assert eval_conditioned(net, *args).tobytes() == eval_conditioned(net, *args).tobytes()
    with pytest.raises(ShapeError):
        eval_conditioned(net, args[0], np.zeros(3), args[2], args[3])
