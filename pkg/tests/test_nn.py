import json

import numpy as np
import pytest

from fuserl.errors import ConfigError, ContractViolation, ModelMismatchError
from fuserl.nn import MLP, Adam, TargetUpdateConfig, decode_array, encode_array, soft_update


def forward_oracle(params, x, output="identity", out_range=(-1.0, 1.0)):
    """Layer-by-layer loops, no matrix products."""
    h = list(x)
    n = len(params) // 2
    for layer in range(n):
        w, b = params[2 * layer], params[2 * layer + 1]
        z = [sum(h[i] * w[i][j] for i in range(len(h))) + b[j] for j in range(len(b))]
        if layer < n - 1:
            h = [max(v, 0.0) for v in z]
        elif output == "tanh":
            lo, hi = out_range
            h = [(hi + lo) / 2 + (hi - lo) / 2 * np.tanh(v) for v in z]
        else:
            h = z
    return np.array(h)


def test_forward_trivial_cases():
    net = MLP.zeros([3, 4, 2])
    assert np.array_equal(net.forward(np.ones(3)), np.zeros(2))
    ident = MLP([3, 3], [np.eye(3), np.zeros(3)])
    x = np.array([0.3, -1.2, 2.0])
    assert np.array_equal(ident.forward(x), x)
    _, gx = ident.backward(np.array([1.0, 2.0, 3.0]))
    assert np.array_equal(gx, [1.0, 2.0, 3.0])
    zero_actor = MLP.zeros([4, 8, 3], output="tanh", out_range=(-1.0, 3.0))
    assert np.array_equal(zero_actor.forward(np.ones(4)), np.full(3, 1.0))


def test_forward_matches_oracle():
    rng = np.random.default_rng(0)
    net = MLP.create([2, 8, 1], rng)
    x = rng.standard_normal(2)
    assert np.allclose(net.forward(x), forward_oracle(net.params, x), atol=1e-12, rtol=0)
    actor = MLP.create([5, 7, 6, 3], rng, output="tanh", out_range=(-2.0, 1.0))
    x = rng.standard_normal(5)
    assert np.allclose(actor.forward(x), forward_oracle(actor.params, x, "tanh", (-2.0, 1.0)), atol=1e-12)


def test_shape_errors():
    net = MLP.create([3, 4, 1], np.random.default_rng(0))
    with pytest.raises(ContractViolation):
        net.forward(np.ones(4))
    with pytest.raises(ContractViolation):
        MLP.create([3, 4, 1], np.random.default_rng(0)).backward(np.ones(1))
    with pytest.raises(ContractViolation):
        MLP([3, 4, 1], [np.zeros((3, 4)), np.zeros(4), np.zeros((5, 1)), np.zeros(1)])


def test_linear_squared_error_closed_form():
    w = np.array([[0.5], [-1.0]])
    net = MLP([2, 1], [w, np.array([0.2])])
    x = np.array([1.5, 0.3])
    pred = net.forward(x)[0]
    grads, _ = net.backward(np.array([2 * (pred - 1.0)]))
    assert np.allclose(grads[0][:, 0], 2 * (pred - 1.0) * x)
    assert np.allclose(grads[1], [2 * (pred - 1.0)])


def _fd_check(net, x, weights, h=1e-5):
    def objective():
        return float(np.sum(weights * net.forward(x)))

    objective()
    grads, gx = net.backward(weights)
    for p, g in zip(net.params, grads):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = objective()
            flat[i] = old - h
            down = objective()
            flat[i] = old
            num = (up - down) / (2 * h)
            assert abs(num - gflat[i]) <= 1e-4 * max(1.0, abs(num)), (i, num, gflat[i])
    xf = x.reshape(-1)
    for i in range(xf.size):
        old = xf[i]
        xf[i] = old + h
        up = objective()
        xf[i] = old - h
        down = objective()
        xf[i] = old
        assert abs((up - down) / (2 * h) - gx.reshape(-1)[i]) <= 1e-4 * max(1.0, abs(gx.reshape(-1)[i]))


@pytest.mark.parametrize("output", ["identity", "tanh"])
def test_backward_finite_differences(output):
    rng = np.random.default_rng(1)
    for _ in range(5):
        net = MLP.create([4, 6, 5, 3], rng, output=output, out_range=(-1.0, 2.0))
        x = rng.standard_normal((7, 4))
        _fd_check(net, x, rng.standard_normal((7, 3)))


def test_stack_matches_members_and_fd():
    rngs = [np.random.default_rng(i) for i in range(3)]
    stack = MLP.create([4, 6, 1], rngs)
    members = [MLP.create([4, 6, 1], np.random.default_rng(i)) for i in range(3)]
    x = np.random.default_rng(9).standard_normal((5, 4))
    out = stack.forward(x)
    assert out.shape == (3, 5, 1)
    for e, m in enumerate(members):
        assert np.allclose(out[e], m.forward(x), atol=1e-14)
    g = np.random.default_rng(10).standard_normal((3, 5, 1))
    stack.forward(x)
    grads, gx = stack.backward(g)
    total_gx = 0
    for e, m in enumerate(members):
        m.forward(x)
        mg, mgx = m.backward(g[e])
        total_gx = total_gx + mgx
        for sg, gg in zip(grads, mg):
            assert np.allclose(sg[e].reshape(gg.shape), gg, atol=1e-13)
    assert np.allclose(gx, total_gx, atol=1e-13)
    _fd_check(stack, x, g)


def test_adam_examples():
    p = [np.array([1.0, -2.0, 3.0])]
    opt = Adam(p, lr=0.001)
    before = p[0].copy()
    opt.step(p, [np.zeros(3)])
    assert np.array_equal(p[0], before) and opt.t == 1
    opt2 = Adam(p, lr=0.001)
    opt2.step(p, [np.ones(3)])
    assert np.allclose(before - p[0], 0.001, rtol=1e-6)
    with pytest.raises(ContractViolation):
        opt2.step(p, [np.ones(2)])


def test_adam_quadratic_bowl():
    rng = np.random.default_rng(0)
    target = rng.standard_normal(6)
    p = [np.zeros(6)]
    opt = Adam(p, lr=0.01)
    losses = []
    for _ in range(100):
        diff = p[0] - target
        losses.append(float(diff @ diff))
        opt.step(p, [2 * diff])
    assert all(b < a for a, b in zip(losses[5:], losses[6:]))


def test_soft_update_examples():
    online = MLP([2, 2], [np.ones((2, 2)), np.ones(2)])
    target = MLP.zeros([2, 2])
    assert not soft_update(target, online, TargetUpdateConfig(0.08, 15), 7)
    assert np.array_equal(target.params[0], np.zeros((2, 2)))
    assert soft_update(target, online, TargetUpdateConfig(0.08, 15), 15)
    assert np.array_equal(target.params[0], np.full((2, 2), 0.08))
    soft_update(target, online, TargetUpdateConfig(1.0, 1), 3)
    assert np.array_equal(target.params[0], online.params[0])
    with pytest.raises(ModelMismatchError):
        soft_update(MLP.zeros([2, 3]), online, TargetUpdateConfig(), 15)
    with pytest.raises(ConfigError):
        TargetUpdateConfig(tau=0.0).validate()


def test_soft_update_contraction():
    rng = np.random.default_rng(2)
    online = MLP.create([3, 4, 1], rng)
    target = MLP.create([3, 4, 1], rng)
    gap = [t - o for t, o in zip(target.params, online.params)]
    soft_update(target, online, TargetUpdateConfig(0.08, 1), 1)
    for t, o, g in zip(target.params, online.params, gap):
        assert np.allclose(t - o, 0.92 * g, atol=1e-15)


def test_serialization_bit_exact():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((3, 4))
    assert np.array_equal(decode_array(json.loads(json.dumps(encode_array(a)))), a)
    net = MLP.create([3, 5, 2], [rng, rng], output="tanh")
    back = MLP.from_dict(json.loads(json.dumps(net.to_dict())))
    assert back.same_arch(net)
    assert all(np.array_equal(p, q) for p, q in zip(net.params, back.params))
    opt = Adam(net.params)
    opt.step(net.params, [np.ones_like(p) for p in net.params])
    o2 = Adam.from_dict(json.loads(json.dumps(opt.to_dict())))
    assert o2.t == 1 and all(np.array_equal(x, y) for x, y in zip(opt.v, o2.v))
