"""
Tests for the reverse-mode core: forward examples, gradient checks, GRL contract
"""

import numpy as np
import pytest

from src.autodiff import (
    GrlConfig, ShapeError, Tensor, add, concat, conv2d, gap, grad_check, grl_apply, linear, linear_relu, mean,
    mean_select, no_grad, numerical_gradient, relu, scale, sigmoid, softmax, softmax_xent,
    weighted_bce_with_logits
)

SEEDS = range(10)
TOL = 1e-2


def param(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape).astype(np.float32), requires_grad=True)


def away_from_zero(rng, *shape):
    # keeps ReLU pre-activations clear of the kink for finite differences
    values = rng.uniform(0.2, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(values.astype(np.float32), requires_grad=True)


# -- forward examples ------------------------------------------------------------


def test_gap_examples():
    f = np.array([[[1.0, 2.0], [3.0, 4.0]]], dtype=np.float32)
    assert gap(f).data.tolist() == [2.5]
    single = np.arange(5, dtype=np.float32).reshape(5, 1, 1)
    np.testing.assert_array_equal(gap(single).data, np.arange(5, dtype=np.float32))
    const = np.stack([np.full((3, 3), 3.0), np.full((3, 3), -1.0)]).astype(np.float32)
    np.testing.assert_allclose(gap(const).data, [3.0, -1.0])


def test_gap_rejects_empty_extent():
    with pytest.raises(ShapeError):
        gap(np.zeros((2, 0, 3), dtype=np.float32))


def test_gap_backward_is_uniform():
    f = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4, 4)).astype(np.float32), requires_grad=True)
    mean(gap(f)).backward()
    np.testing.assert_allclose(f.grad, np.full(f.shape, 1.0 / (6 * 16)), rtol=1e-6)


def test_linear_relu_examples():
    eye = Tensor(np.eye(2, dtype=np.float32))
    assert linear_relu(eye, Tensor(np.zeros(2, dtype=np.float32)), np.array([1.0, -1.0])).data.tolist() == [1.0, 0.0]
    zero_w = Tensor(np.zeros((1, 3), dtype=np.float32))
    assert linear_relu(zero_w, Tensor(np.array([5.0], dtype=np.float32)), np.ones(3)).data.tolist() == [5.0]
    w = Tensor(np.array([[2.0]], dtype=np.float32))
    assert linear_relu(w, Tensor(np.array([-1.0], dtype=np.float32)), np.array([3.0])).data.tolist() == [5.0]


def test_linear_shape_mismatch():
    w = Tensor(np.zeros((2, 3), dtype=np.float32))
    with pytest.raises(ShapeError):
        linear(np.ones(4, dtype=np.float32), w, Tensor(np.zeros(2, dtype=np.float32)))


def test_relu_gradient_at_zero_is_zero():
    x = Tensor(np.array([-1.0, 0.0, 2.0], dtype=np.float32), requires_grad=True)
    mean(relu(x)).backward()
    np.testing.assert_allclose(x.grad, [0.0, 0.0, 1.0 / 3])


def test_relu_propagates_nan():
    out = relu(Tensor(np.array([np.nan, -1.0, 2.0], dtype=np.float32)))
    assert np.isnan(out.data[0])
    np.testing.assert_array_equal(out.data[1:], [0.0, 2.0])


def test_softmax_xent_examples():
    probs, loss = softmax_xent(Tensor(np.array([0.0, 0.0], dtype=np.float32)), 0)
    np.testing.assert_allclose(probs, [0.5, 0.5])
    assert loss.item() == pytest.approx(np.log(2), abs=1e-6)

    probs, _ = softmax_xent(Tensor(np.array([np.log(2), 0.0])), 0)
    np.testing.assert_allclose(probs, [2 / 3, 1 / 3], rtol=1e-6)

    _, loss = softmax_xent(Tensor(np.array([0.0, -1e4])), 0)
    assert loss.item() == pytest.approx(0.0, abs=1e-9)


def test_softmax_xent_gradient_is_probs_minus_onehot():
    logits = Tensor(np.array([0.3, -1.2, 2.0], dtype=np.float64), requires_grad=True)
    probs, loss = softmax_xent(logits, 2)
    loss.backward()
    np.testing.assert_allclose(logits.grad, probs - np.array([0, 0, 1]), atol=1e-12)


def test_softmax_zero_classes():
    with pytest.raises(ShapeError):
        softmax(np.zeros((2, 0)))


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_properties(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=5.0, size=(4, 7))
    probs = softmax(logits)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(softmax(logits + 100.0), probs, atol=1e-12)


def test_grl_examples():
    x = np.array([1.5, -2.0], dtype=np.float32)
    out = grl_apply(Tensor(x), GrlConfig(1.0))
    np.testing.assert_array_equal(out.data, x)

    t = Tensor(x.copy(), requires_grad=True)
    y = grl_apply(t, GrlConfig(1.0))
    # upstream gradient [1, -2] through the weighted sum sum(y * [1, -2])
    linear(y, Tensor(np.array([[1.0, -2.0]], dtype=np.float32)), Tensor(np.zeros(1, dtype=np.float32))).backward()
    np.testing.assert_allclose(t.grad, [-1.0, 2.0])

    t0 = Tensor(x.copy(), requires_grad=True)
    mean(grl_apply(t0, GrlConfig(0.0))).backward()
    np.testing.assert_array_equal(t0.grad, np.zeros(2))


def test_grl_rejects_negative_lambda():
    with pytest.raises(ValueError):
        GrlConfig(-0.5)


@pytest.mark.parametrize("lam", [0.0, 0.5, 1.0, 2.0])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_grl_contract(lam, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 5)).astype(np.float32)
    w = param(rng, 4, 5)
    b = param(rng, 4)
    labels = rng.integers(0, 4, size=3)

    forward = grl_apply(Tensor(x), GrlConfig(lam))
    assert forward.data.tobytes() == x.tobytes()

    def loss(inp, reversed_):
        h = grl_apply(inp, GrlConfig(lam)) if reversed_ else inp
        return softmax_xent(linear(h, w, b), labels)[1]

    xa = Tensor(x.astype(np.float64), requires_grad=True)
    loss(xa, True).backward()
    xb = Tensor(x.astype(np.float64), requires_grad=True)
    loss(xb, False).backward()
    np.testing.assert_allclose(xa.grad, -lam * xb.grad, atol=1e-12)

    # the ablated graph itself agrees with finite differences
    numeric = numerical_gradient(lambda: loss(xb, False), xb, eps=1e-5)
    np.testing.assert_allclose(xa.grad, -lam * numeric, atol=1e-6)


# -- gradient checks ---------------------------------------------------------------


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_linear(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 6)).astype(np.float32)
    w, b = param(rng, 4, 6), param(rng, 4)
    labels = rng.integers(0, 4, size=3)
    assert grad_check(lambda: softmax_xent(linear(x, w, b), labels)[1], [w, b], eps=1e-5) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_linear_relu(seed):
    rng = np.random.default_rng(seed)
    x = away_from_zero(rng, 2, 5)
    w = Tensor(np.eye(5, dtype=np.float32), requires_grad=True)
    b = Tensor(np.zeros(5, dtype=np.float32), requires_grad=True)
    w2, b2 = param(rng, 3, 5), param(rng, 3)
    labels = rng.integers(0, 3, size=2)
    assert grad_check(lambda: softmax_xent(linear(linear_relu(w, b, x), w2, b2), labels)[1], [x, w2, b2], eps=1e-5) < TOL


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("stride,padding", [(1, "same"), (2, "same"), (1, "valid")])
def test_grad_conv2d(seed, stride, padding):
    rng = np.random.default_rng(seed)
    x = param(rng, 2, 3, 6, 6)
    w, b = param(rng, 4, 3, 3, 3), param(rng, 4)
    w2, b2 = param(rng, 3, 4), param(rng, 3)
    labels = rng.integers(0, 3, size=2)

    def fn():
        return softmax_xent(linear(gap(conv2d(x, w, b, stride=stride, padding=padding)), w2, b2), labels)[1]

    assert grad_check(fn, [x, w, b], eps=1e-5) < TOL


def test_conv2d_output_shapes():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 3, 8, 8)).astype(np.float32)
    w, b = param(rng, 5, 3, 3, 3), param(rng, 5)
    assert conv2d(x, w, b, stride=1, padding="same").shape == (1, 5, 8, 8)
    assert conv2d(x, w, b, stride=2, padding="same").shape == (1, 5, 4, 4)
    assert conv2d(x, w, b, stride=1, padding="valid").shape == (1, 5, 6, 6)
    with pytest.raises(ValueError):
        conv2d(x, w, b, padding="reflect")
    with pytest.raises(ShapeError):
        conv2d(x[:, :2], w, b)


def test_conv2d_matches_direct_sum():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = conv2d(x, Tensor(w), Tensor(b), padding="valid").data
    for o in range(3):
        for i in range(3):
            for j in range(3):
                expected = (x[0, :, i:i + 3, j:j + 3] * w[o]).sum() + b[o]
                assert out[0, o, i, j] == pytest.approx(expected, rel=1e-9, abs=1e-9)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_mean_select(seed):
    rng = np.random.default_rng(seed)
    f = param(rng, 2, 4, 3, 3)
    index = np.sort(np.stack([rng.choice(9, size=3, replace=False) for _ in range(2)]), axis=1)
    w, b = param(rng, 2, 4), param(rng, 2)
    labels = rng.integers(0, 2, size=2)
    assert grad_check(lambda: softmax_xent(linear(mean_select(f, index), w, b), labels)[1], [f, w, b], eps=1e-5) < TOL


def test_mean_select_gradient_only_reaches_selected_cells():
    f = Tensor(np.ones((1, 2, 2, 2), dtype=np.float32), requires_grad=True)
    mean(mean_select(f, np.array([[0, 3]]))).backward()
    grad = f.grad.reshape(2, 4)
    np.testing.assert_allclose(grad[:, [1, 2]], 0.0)
    np.testing.assert_allclose(grad[:, [0, 3]], 0.25)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_sigmoid_and_bce(seed):
    rng = np.random.default_rng(seed)
    a = param(rng, 6, 1, low=-3.0, high=3.0)
    targets = rng.integers(0, 2, size=6)
    assert grad_check(lambda: weighted_bce_with_logits(a, targets, pos_weight=2.5), [a], eps=1e-5) < TOL
    assert grad_check(lambda: mean(sigmoid(a)), [a], eps=1e-5) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_concat_scale_add(seed):
    rng = np.random.default_rng(seed)
    g, r = param(rng, 2, 3), param(rng, 2, 4)
    w, b = param(rng, 3, 7), param(rng, 3)
    labels = rng.integers(0, 3, size=2)

    def fn():
        logits = linear(concat(g, r), w, b)
        return add(scale(softmax_xent(logits, labels)[1], 0.7), mean(sigmoid(logits)))

    assert grad_check(fn, [g, r, w, b], eps=1e-5) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_through_grl(seed):
    rng = np.random.default_rng(seed)
    g = param(rng, 3, 4)
    w, b = param(rng, 2, 4), param(rng, 2)
    labels = rng.integers(0, 2, size=3)
    cfg = GrlConfig(1.0)
    analytic_reversed = grad_check(lambda: softmax_xent(linear(grl_apply(g, cfg), w, b), labels)[1], [w, b], eps=1e-5)
    assert analytic_reversed < TOL

    # the reversed path disagrees with finite differences of the (identity) forward by exactly the sign
    g64 = Tensor(g.data.astype(np.float64), requires_grad=True)
    softmax_xent(linear(grl_apply(g64, cfg), w, b), labels)[1].backward()
    numeric = numerical_gradient(lambda: softmax_xent(linear(g64, w, b), labels)[1], g64, eps=1e-5)
    np.testing.assert_allclose(g64.grad, -numeric, atol=1e-6)


def test_grad_check_constant_graph():
    w = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    constant = np.array([2.0])
    assert grad_check(lambda: Tensor(constant), [w]) == 0.0


def test_grad_check_needs_scalar():
    w = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    with pytest.raises(ShapeError):
        grad_check(lambda: scale(w, 2.0), [w])


def test_grad_check_restores_parameters():
    rng = np.random.default_rng(0)
    w, b = param(rng, 2, 3), param(rng, 2)
    before = w.data.copy()
    grad_check(lambda: mean(linear(np.ones(3), w, b)), [w, b])
    assert w.data.dtype == np.float32
    np.testing.assert_array_equal(w.data, before)
    assert w.grad is None


def test_backward_is_deterministic():
    def run():
        rng = np.random.default_rng(7)
        x = param(rng, 2, 3, 6, 6)
        w, b = param(rng, 4, 3, 3, 3), param(rng, 4)
        w2, b2 = param(rng, 3, 4), param(rng, 3)
        softmax_xent(linear(gap(relu(conv2d(x, w, b))), w2, b2), np.array([0, 2]))[1].backward()
        return [t.grad.copy() for t in (x, w, b, w2, b2)]

    for first, second in zip(run(), run()):
        assert first.tobytes() == second.tobytes()


def test_no_grad_builds_no_graph():
    rng = np.random.default_rng(0)
    w, b = param(rng, 2, 3), param(rng, 2)
    with no_grad():
        out = linear(np.ones(3), w, b)
    assert out.creator is None and not out.requires_grad
    assert linear(np.ones(3), w, b).requires_grad


def test_detach_stops_gradient():
    rng = np.random.default_rng(0)
    w, b = param(rng, 2, 3), param(rng, 2)
    out = linear(np.ones(3), w, b)
    frozen = out.detach()
    assert not frozen.requires_grad and frozen.creator is None
    np.testing.assert_array_equal(frozen.data, out.data)


def test_backward_needs_scalar():
    w = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    with pytest.raises(ShapeError):
        scale(w, 2.0).backward()
