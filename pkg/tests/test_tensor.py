import numpy as np
import pytest

import hwnas.tensor as T
from hwnas.tensor import Tensor

from gradcheck import check_grads

RNG = np.random.default_rng(101)


def rand(*shape, low=-1.0, high=1.0):
    return RNG.uniform(low, high, size=shape)


def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    y = x ** 2
    y.backward()
    assert x.grad == pytest.approx(6.0)


def test_backward_fanout_sums():
    x = Tensor(1.5, requires_grad=True)
    y = x + x
    y.backward()
    assert x.grad == pytest.approx(2.0)


def test_loss_grad_wrt_itself_is_one():
    x = Tensor(2.0, requires_grad=True)
    y = x * 4.0
    y.backward()
    assert y.grad == pytest.approx(1.0)


def test_repeated_backward_accumulates():
    x = Tensor(3.0, requires_grad=True)
    y = x ** 2
    y.backward()
    y.backward()
    assert x.grad == pytest.approx(12.0)
    x.zero_grad()
    assert x.grad == 0.0


def test_grad_shape_matches_values():
    x = Tensor(rand(4, 3), requires_grad=True)
    loss = (x * 2.0).sum()
    loss.backward()
    assert x.grad.shape == x.data.shape


def test_softmax_rows_sum_to_one():
    for _ in range(20):
        x = Tensor(rand(6, 5) * 10)
        s = T.softmax(x, axis=1)
        np.testing.assert_allclose(s.data.sum(axis=1), 1.0, atol=1e-6)


def test_softmax_equal_logits():
    s = T.softmax(Tensor(np.zeros(5)), axis=0)
    np.testing.assert_allclose(s.data, 0.2, atol=1e-12)


def test_relu_kills_negatives():
    x = rand(20)
    out = T.relu(Tensor(-np.abs(x) - 0.1))
    assert np.all(out.data == 0)


def test_cross_entropy_confident_logits():
    target = (rand(2, 4, 4) > 0).astype(np.int64)
    logits = np.zeros((2, 2, 4, 4))
    for c in (0, 1):
        logits[:, c][target == c] = 50.0
    loss = T.cross_entropy_2d(Tensor(logits), target)
    assert loss.item() < 1e-3


def test_cross_entropy_uniform_is_ln2():
    loss = T.cross_entropy_2d(Tensor(np.zeros((1, 2, 3, 3))),
                              np.zeros((1, 3, 3), dtype=np.int64))
    assert loss.item() == pytest.approx(np.log(2.0), abs=1e-6)


def test_cross_entropy_rejects_nonbinary_target():
    with pytest.raises(ValueError, match="binary"):
        T.cross_entropy_2d(Tensor(np.zeros((1, 2, 2, 2))),
                           np.full((1, 2, 2), 2))


def test_mse_values():
    p = Tensor(np.array([0.2, 0.4, 0.6]))
    assert T.mse(p, p.data.copy()).item() == 0.0
    assert T.mse(p, p.data - 0.1).item() == pytest.approx(0.01, abs=1e-12)


def test_concat_mismatch_raises():
    with pytest.raises(ValueError, match="concat"):
        T.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))], axis=1)


def test_sigmoid_range_and_symmetry():
    x = rand(50) * 20
    s = T.sigmoid(Tensor(x))
    assert np.all((s.data > 0) & (s.data < 1))
    s2 = T.sigmoid(Tensor(-x))
    np.testing.assert_allclose(s.data + s2.data, 1.0, atol=1e-12)


def test_no_grad_builds_no_graph():
    x = Tensor(rand(3), requires_grad=True)
    with T.no_grad():
        y = (x * 2.0).sum()
    assert y._parents == ()


@pytest.mark.parametrize("trial", range(20))
def test_gradcheck_elementwise_chain(trial):
    rng = np.random.default_rng(200 + trial)
    a = rng.uniform(-1, 1, (3, 4)) + np.sign(rng.uniform(-1, 1, (3, 4))) * 0.1
    b = rng.uniform(-1, 1, (3, 4))

    def loss(ts):
        x, y = ts
        z = T.relu(x) + T.sigmoid(y) * 0.5
        return (z * z).sum()

    check_grads(loss, [a, b])


@pytest.mark.parametrize("trial", range(20))
def test_gradcheck_softmax_logsoftmax(trial):
    rng = np.random.default_rng(300 + trial)
    x = rng.uniform(-2, 2, (4, 5))

    def loss(ts):
        s = T.softmax(ts[0], axis=1)
        ls = T.log_softmax(ts[0], axis=1)
        return (s * Tensor(rng2)).sum() + (ls * Tensor(rng3)).sum()

    rng2 = rng.uniform(-1, 1, (4, 5))
    rng3 = rng.uniform(-1, 1, (4, 5))
    check_grads(loss, [x])


@pytest.mark.parametrize("trial", range(20))
def test_gradcheck_linear(trial):
    rng = np.random.default_rng(400 + trial)
    x = rng.uniform(-1, 1, (5, 4))
    w = rng.uniform(-1, 1, (4, 3))
    b = rng.uniform(-1, 1, (3,))

    def loss(ts):
        return (T.linear(ts[0], ts[1], ts[2]) ** 2).sum()

    check_grads(loss, [x, w, b])


@pytest.mark.parametrize("trial", range(20))
def test_gradcheck_losses(trial):
    rng = np.random.default_rng(500 + trial)
    logits = rng.uniform(-1, 1, (2, 2, 3, 3))
    target = (rng.uniform(0, 1, (2, 3, 3)) > 0.5).astype(np.int64)
    check_grads(lambda ts: T.cross_entropy_2d(ts[0], target), [logits])

    pred = rng.uniform(0, 1, (6,))
    tgt = rng.uniform(0, 1, (6,))
    check_grads(lambda ts: T.mse(ts[0], tgt), [pred])


@pytest.mark.parametrize("trial", range(10))
def test_gradcheck_reductions_and_shapes(trial):
    rng = np.random.default_rng(600 + trial)
    x = rng.uniform(-1, 1, (2, 3, 4, 4))
    m = rng.uniform(-1, 1, (2, 3))

    def loss(ts):
        g = T.global_avg_pool(ts[0])
        u = T.upsample_nearest2x(ts[0])
        cat = T.concat([ts[0], ts[0] * 2.0], axis=1)
        return (g * Tensor(m)).sum() + u.mean() + cat.sum(axis=(2, 3)).sum()

    check_grads(loss, [x])


@pytest.mark.parametrize("trial", range(10))
def test_gradcheck_weighted_sum(trial):
    rng = np.random.default_rng(700 + trial)
    w = rng.uniform(-1, 1, (3,))
    xs = [rng.uniform(-1, 1, (2, 3, 3)) for _ in range(3)]

    def loss(ts):
        return (T.weighted_sum(ts[0], ts[1:]) ** 2).sum()

    check_grads(loss, [w] + xs)


def test_weighted_sum_shape_validation():
    with pytest.raises(ValueError):
        T.weighted_sum(Tensor(np.zeros((2, 2))), [Tensor(np.zeros(3))])


def test_softmax_entropy_limits():
    flat = T.softmax_entropy(Tensor(np.zeros((1, 2, 2, 2))), axis=1)
    np.testing.assert_allclose(flat.data, np.log(2.0), atol=1e-9)
    sharp = np.zeros((1, 2, 2, 2))
    sharp[:, 1] = 60.0
    np.testing.assert_allclose(T.softmax_entropy(Tensor(sharp), axis=1).data,
                               0.0, atol=1e-9)


def test_deterministic_forward_backward():
    def run():
        rng = np.random.default_rng(77)
        x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
        losses = []
        for _ in range(5):
            out = T.linear(T.relu(x), w)
            loss = (T.softmax(out, axis=1) ** 2).sum()
            loss.backward()
            x.data -= 0.01 * x.grad
            w.data -= 0.01 * w.grad
            x.zero_grad()
            w.zero_grad()
            losses.append(loss.item())
        return losses

    a, b = run(), run()
    assert all(x == y for x, y in zip(a, b))  # bit identical
