import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgfnoma.nn import Adam, QNetwork, backward, clip_by_norm, dueling_aggregate, forward


def random_net(rng, head, members=1, n_in=5, n_out=7, hidden=(6, 5, 4)):
    net = QNetwork(n_in, n_out, hidden=hidden, head=head, members=members, rng=rng)
    # nonzero biases keep pre-activations away from exact ReLU kinks
    net.params += 0.1 * rng.standard_normal(net.params.shape)
    return net


def oracle_forward(net, x):
    """Plain-loop forward pass, independent of the library's matmul path."""

    def dense(h, name, act):
        w = net.weights[name][0]
        b = net.biases[name][0]
        out = []
        for j in range(w.shape[1]):
            s = b[j]
            for i in range(w.shape[0]):
                s += h[i] * w[i, j]
            out.append(max(s, 0.0) if act else s)
        return out

    names = net.layer_names()
    trunk = [n for n in names if n.startswith("trunk")]
    h = list(x)
    for k, name in enumerate(trunk):
        last = k == len(trunk) - 1
        h = dense(h, name, act=not last or net.head == "dueling")
    if net.head == "plain":
        return np.array(h)
    v = dense(dense(h, "value0", True), "value1", False)[0]
    a = dense(dense(h, "advantage0", True), "advantage1", False)
    return np.array([v + ai - sum(a) / len(a) for ai in a])


def test_zero_network_outputs_zero():
    net = QNetwork(4, 6)
    assert np.all(forward(net, np.ones(4)) == 0)


def test_relu_clamp():
    net = QNetwork(1, 1, hidden=(1,))
    net.weights["trunk0"][...] = 1.0
    net.biases["trunk0"][...] = -1.0
    net.weights["trunk1"][...] = 1.0
    assert forward(net, np.array([0.5]))[0] == 0.0


@pytest.mark.parametrize("head", ["plain", "dueling"])
def test_forward_matches_loop_oracle(head):
    rng = np.random.default_rng(0)
    for _ in range(5):
        net = random_net(rng, head)
        x = rng.standard_normal(5)
        assert np.allclose(forward(net, x), oracle_forward(net, x), atol=1e-10, rtol=0)


def test_dimension_mismatch():
    net = QNetwork(4, 3)
    with pytest.raises(ValueError):
        forward(net, np.ones(5))
    stacked = QNetwork(4, 3, members=2)
    with pytest.raises(ValueError):
        stacked.forward(np.ones((3, 1, 4)))


def test_heads_share_output_size():
    x = np.ones(8)
    rng = np.random.default_rng(1)
    assert forward(QNetwork(8, 27, rng=rng), x).shape == forward(QNetwork(8, 27, head="dueling", rng=rng), x).shape


def test_architecture_sizes():
    net = QNetwork(12, 27)
    dims = [(net.weights[n].shape[1], net.weights[n].shape[2]) for n in net.layer_names()]
    assert dims == [(12, 250), (250, 120), (120, 60), (60, 27)]
    duel = QNetwork(12, 27, head="dueling")
    assert duel.weights["value1"].shape[-1] == 1
    assert duel.weights["advantage1"].shape[-1] == 27


def test_dueling_aggregate_examples():
    q = dueling_aggregate(2.0, [1.0, 3.0])
    assert q.tolist() == [1.0, 3.0]
    with pytest.raises(ValueError):
        dueling_aggregate(1.0, [])


@settings(max_examples=50)
@given(st.floats(-50, 50), st.lists(st.floats(-50, 50), min_size=1, max_size=30))
def test_dueling_identity(v, a):
    q = dueling_aggregate(v, a)
    assert abs(np.mean(q - v)) < 1e-12 * max(1.0, np.abs(a).max(), abs(v))
    # advantages closer than rounding can tie in q, so compare values not indices
    a = np.asarray(a)
    assert a[np.argmax(q)] >= a.max() - 1e-12 * max(1.0, np.abs(a).max(), abs(v))


def _numeric_grad(net, s, a, y, h=1e-6):
    num = np.zeros_like(net.params)
    for m in range(net.members):
        for k in range(net.n_params):
            old = net.params[m, k]
            net.params[m, k] = old + h
            lp = net.loss_and_grad(s, a, y)[0][m]
            net.params[m, k] = old - h
            lm = net.loss_and_grad(s, a, y)[0][m]
            net.params[m, k] = old
            num[m, k] = (lp - lm) / (2 * h)
    return num


@pytest.mark.parametrize("head", ["plain", "dueling"])
def test_gradient_matches_finite_differences(head):
    rng = np.random.default_rng(2)
    net = random_net(rng, head, members=2)
    s = rng.standard_normal((2, 4, 5))
    a = rng.integers(0, 7, (2, 4))
    y = rng.standard_normal((2, 4))
    _, g = net.loss_and_grad(s, a, y)
    assert np.allclose(g, _numeric_grad(net, s, a, y), rtol=1e-5, atol=1e-7)


def test_loss_is_mean_squared_td_error():
    rng = np.random.default_rng(3)
    net = random_net(rng, "dueling")
    s = rng.standard_normal((8, 5))
    a = rng.integers(0, 7, 8)
    y = rng.standard_normal(8)
    loss, _ = net.loss_and_grad(s, a, y)
    q = np.array([oracle_forward(net, row) for row in s])
    assert loss[0] == pytest.approx(np.mean((q[np.arange(8), a] - y) ** 2), rel=1e-10)


def test_members_are_independent():
    rng = np.random.default_rng(4)
    net = random_net(rng, "plain", members=3)
    s = rng.standard_normal((3, 4, 5))
    a = rng.integers(0, 7, (3, 4))
    y = rng.standard_normal((3, 4))
    _, g1 = net.loss_and_grad(s, a, y)
    s2, y2 = s.copy(), y.copy()
    s2[1] += 1.0
    y2[1] -= 2.0
    _, g2 = net.loss_and_grad(s2, a, y2)
    assert np.array_equal(g1[[0, 2]], g2[[0, 2]])
    assert not np.array_equal(g1[1], g2[1])


def test_backward_helper_matches_method():
    rng = np.random.default_rng(5)
    net = random_net(rng, "plain")
    s = rng.standard_normal((4, 5))
    a = rng.integers(0, 7, 4)
    y = rng.standard_normal(4)
    assert np.array_equal(backward(net, s, y, a), net.loss_and_grad(s, a, y)[1])


def _reference_adam(p, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        p = p - lr * mh / (np.sqrt(vh) + eps)
    return p


def test_adam_matches_textbook_recurrence():
    rng = np.random.default_rng(6)
    p0 = rng.standard_normal((2, 10))
    grads = [rng.standard_normal((2, 10)) for _ in range(25)]
    opt = Adam((2, 10))
    p = p0.copy()
    for g in grads:
        opt.step(p, g)
    assert np.allclose(p, _reference_adam(p0, grads), rtol=0, atol=1e-12)
    assert opt.step_count == 25
    assert opt.m.shape == opt.v.shape == (2, 10)


def test_adam_first_step_size():
    opt = Adam((1, 3))
    p = np.zeros((1, 3))
    opt.step(p, np.array([[1.0, -2.0, 0.5]]))
    assert np.allclose(p, [[-1e-3, 1e-3, -1e-3]], atol=1e-9)


def test_adam_rejects_non_finite():
    opt = Adam((1, 2))
    with pytest.raises(FloatingPointError):
        opt.step(np.zeros((1, 2)), np.array([[np.nan, 0.0]]))


def test_adam_state_round_trip():
    rng = np.random.default_rng(7)
    a, b = Adam((1, 4)), Adam((1, 4))
    p = rng.standard_normal((1, 4))
    a.step(p, rng.standard_normal((1, 4)))
    b.load_state_dict(a.state_dict())
    g = rng.standard_normal((1, 4))
    pa, pb = p.copy(), p.copy()
    a.step(pa, g)
    b.step(pb, g)
    assert np.array_equal(pa, pb)


def test_clip_by_norm():
    g = np.array([[3.0, 4.0], [0.3, 0.4]])
    out = clip_by_norm(g, 1.0)
    assert np.allclose(out, [[0.6, 0.8], [0.3, 0.4]])


def test_clone_and_copy():
    rng = np.random.default_rng(8)
    net = random_net(rng, "dueling")
    twin = net.clone()
    assert np.array_equal(twin.params, net.params)
    twin.params += 1
    assert not np.array_equal(twin.params, net.params)
    with pytest.raises(ValueError):
        QNetwork(5, 6).copy_from(net)


def test_float32_stack_runs():
    rng = np.random.default_rng(9)
    net = QNetwork(12, 27, head="dueling", members=3, rng=rng, dtype=np.float32)
    q = net.forward(rng.standard_normal((3, 2, 12)))
    assert q.dtype == np.float32 and q.shape == (3, 2, 27)


def test_dueling_aggregate_spec_examples():
    assert dueling_aggregate(2.0, [1.0, 1.0, 1.0]).tolist() == [2.0, 2.0, 2.0]
    assert dueling_aggregate(0.0, [3.0, 0.0, 0.0]).tolist() == [2.0, -1.0, -1.0]


def test_hand_chain_rule():
    net = QNetwork(1, 1, hidden=())
    net.weights["trunk0"][...] = 1.0
    _, g = net.loss_and_grad(np.array([[2.0]]), np.array([0]), np.array([5.0]))
    # d/dw (y - (w s + b))^2 = 2 (w s + b - y) s = 2 (2 - 5) 2
    assert net.weights["trunk0"].size == 1
    grad_w = g[0, 0]
    assert grad_w == -12.0


def test_adam_zero_gradient_is_noop():
    p = np.arange(6.0).reshape(1, 6)
    Adam((1, 6)).step(p, np.zeros((1, 6)))
    assert np.array_equal(p, np.arange(6.0).reshape(1, 6))


def test_adam_reduces_regression_loss():
    rng = np.random.default_rng(10)
    net = QNetwork(4, 3, hidden=(16, 16), rng=rng)
    s = rng.standard_normal((32, 4))
    a = rng.integers(0, 3, 32)
    y = rng.standard_normal(32)
    opt = Adam(net.params.shape)
    first, _ = net.loss_and_grad(s, a, y)
    for _ in range(100):
        _, g = net.loss_and_grad(s, a, y)
        opt.step(net.params, g)
    last, _ = net.loss_and_grad(s, a, y)
    assert last[0] <= 0.5 * first[0]


def test_identical_seeds_identical_parameters():
    def trained():
        rng = np.random.default_rng(11)
        net = QNetwork(3, 2, hidden=(8,), head="dueling", rng=rng)
        opt = Adam(net.params.shape)
        for _ in range(20):
            s = rng.standard_normal((4, 3))
            _, g = net.loss_and_grad(s, rng.integers(0, 2, 4), rng.standard_normal(4))
            opt.step(net.params, g)
        return net.params

    assert np.array_equal(trained(), trained())


def test_adam_flushes_subnormal_moments():
    opt = Adam((1, 4), dtype=np.float32)
    p = np.zeros((1, 4), dtype=np.float32)
    opt.step(p, np.full((1, 4), 1e-3, dtype=np.float32))
    for _ in range(1500):
        opt.step(p, np.zeros((1, 4), dtype=np.float32))
    tiny = np.finfo(np.float32).tiny
    for moment in (opt.m, opt.v):
        assert np.all((moment == 0) | (np.abs(moment) >= tiny))
