import math

import mpmath
import numpy as np
import pytest

from giftlab.core import make_rng
from giftlab.errors import DataError, DimensionError
from giftlab.nn import (
    GLU, LayerNorm, Linear, Param, ReLU, Sigmoid, SoftmaxXent, StatsPool,
    check_gradients, gradcheck, layer_closure, sigmoid, softmax_xent,
)


def central_diff(f, x, h=1e-6):
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def randomize(layer, rng):
    for p in layer.params:
        p.value[...] = rng.uniform(-1, 1, size=p.value.shape)


def test_linear_identity():
    lin = Linear(3, 3, "l", "embedding")
    lin.weight.value[...] = np.eye(3)
    x = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(lin.forward(x), x)


def test_linear_small_case():
    lin = Linear(2, 1, "l", "embedding")
    lin.weight.value[...] = [[1], [1]]
    lin.bias.value[...] = [0.5]
    assert lin.forward(np.array([[1.0, 1.0]])).tolist() == [[2.5]]


def test_linear_matches_matmul_oracle(rng):
    lin = Linear(4, 3, "l", "adapter", rng)
    lin.bias.value[...] = rng.normal(size=3)
    x = rng.normal(size=(5, 4))
    expected = np.array([[sum(x[i, k] * lin.weight.value[k, j] for k in range(4)) + lin.bias.value[j]
                          for j in range(3)] for i in range(5)])
    np.testing.assert_allclose(lin.forward(x), expected, rtol=1e-12)


def test_linear_shape_error():
    with pytest.raises(DimensionError):
        Linear(3, 2, "l", "embedding").forward(np.zeros((2, 4)))


def test_xavier_bound(rng):
    lin = Linear(10, 6, "l", "embedding", rng)
    assert np.all(np.abs(lin.weight.value) <= math.sqrt(6 / 16))
    assert np.all(lin.bias.value == 0)


def test_relu_values():
    r = ReLU()
    assert r.forward(np.array([[-1.0, 0.0, 2.0]])).tolist() == [[0.0, 0.0, 2.0]]
    assert np.all(r.forward(-np.ones((2, 3))) == 0)


def test_relu_backward_vs_finite_differences(rng):
    x = rng.uniform(-1, 1, size=(4, 5))
    x[np.abs(x) < 1e-3] = 0.5
    probe = rng.normal(size=x.shape)
    r = ReLU()
    r.forward(x)
    analytic = r.backward(probe)
    numeric = central_diff(lambda: float(np.sum(ReLU().forward(x) * probe)), x)
    np.testing.assert_allclose(analytic, numeric, atol=1e-8)
    assert np.all(analytic[x < 0] == 0)


def test_sigmoid_values():
    assert sigmoid(np.array([0.0]))[0] == 0.5
    assert abs(sigmoid(np.array([40.0]))[0] - 1.0) < 1e-12
    with np.errstate(over="raise", invalid="raise"):
        v = sigmoid(np.array([-745.0, -1000.0]))
    assert np.all(v >= 0) and np.all(np.isfinite(v))
    mp = float(1 / (1 + mpmath.exp(-1)))
    assert abs(sigmoid(np.array([1.0]))[0] - mp) < 1e-15


def test_layernorm_constant_row():
    ln = LayerNorm(4, "n", "adapter")
    assert np.all(ln.forward(np.full((2, 4), 3.0)) == 0)


def test_layernorm_moments(rng):
    ln = LayerNorm(16, "n", "adapter")
    y = ln.forward(rng.normal(size=(3, 16)) * 5 + 2)
    np.testing.assert_allclose(y.mean(axis=1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=1), 1, atol=1e-3)


def test_layernorm_needs_two_dims():
    with pytest.raises(DimensionError):
        LayerNorm(1, "n", "adapter")


def test_glu_zero_gate_is_half_linear(rng):
    glu = GLU(5, 3, "g", "adapter", rng)
    glu.b.value[...] = rng.normal(size=3)
    glu.V.value[...] = 0
    glu.c.value[...] = 0
    x = rng.normal(size=(4, 5))
    lin = Linear(5, 3, "l", "adapter")
    lin.weight.value[...] = glu.W.value
    lin.bias.value[...] = glu.b.value
    assert np.array_equal(glu.forward(x), 0.5 * lin.forward(x))


def test_glu_zero_linear_branch(rng):
    glu = GLU(5, 3, "g", "adapter", rng)
    glu.W.value[...] = 0
    glu.c.value[...] = rng.normal(size=3)
    assert np.all(glu.forward(rng.normal(size=(4, 5))) == 0)


def test_glu_scalar_case():
    glu = GLU(1, 1, "g", "adapter")
    glu.W.value[...] = 1
    glu.V.value[...] = 1
    out = glu.forward(np.array([[1.0]]))[0, 0]
    assert abs(out - float(1 / (1 + mpmath.exp(-1)))) < 1e-15


def test_glu_shape_error():
    with pytest.raises(DimensionError):
        GLU(3, 2, "g", "adapter").forward(np.zeros((1, 2)))


def test_softmax_xent_uniform_logits():
    loss, _ = softmax_xent(np.zeros((3, 4)), [0, 1, 3])
    assert abs(loss - math.log(4)) < 1e-15


def test_softmax_xent_saturated():
    logits = np.zeros((1, 3))
    logits[0, 2] = 1000.0
    loss, grad = softmax_xent(logits, [2])
    assert loss < 1e-12 and np.all(np.isfinite(grad))


def test_softmax_xent_grad_vs_finite_differences(rng):
    logits = rng.normal(size=(3, 5))
    labels = [1, 4, 0]
    _, grad = softmax_xent(logits, labels)
    numeric = central_diff(lambda: softmax_xent(logits, labels)[0], logits)
    rel = np.abs(grad - numeric) / np.maximum(1e-8, np.abs(grad) + np.abs(numeric))
    assert rel.max() < 1e-6


def test_softmax_xent_shift_invariant(rng):
    logits = rng.normal(size=(4, 6))
    labels = [0, 5, 2, 2]
    base = softmax_xent(logits, labels)[0]
    shifted = softmax_xent(logits + rng.normal(size=(4, 1)) * 100, labels)[0]
    assert abs(base - shifted) < 1e-9


def test_softmax_xent_label_range():
    with pytest.raises(DataError):
        softmax_xent(np.zeros((1, 3)), [3])


@pytest.mark.parametrize("tol, build", [
    (1e-7, lambda r: Linear(4, 3, "l", "embedding", r)),
    (1e-5, lambda r: ReLU()),
    (1e-5, lambda r: Sigmoid()),
    (1e-5, lambda r: LayerNorm(5, "n", "adapter")),
    (1e-6, lambda r: GLU(4, 3, "g", "adapter", r)),
])
def test_layer_gradcheck(tol, build):
    r = make_rng(42)
    layer = build(r)
    randomize(layer, r)
    dims = {Linear: 4, GLU: 4, LayerNorm: 5}.get(type(layer), 6)
    x = r.uniform(-1, 1, size=(3, dims))
    report = gradcheck(layer, x, tolerance=tol, rng=r)
    assert report.passed, report.lines()


def test_softmax_layer_gradcheck():
    r = make_rng(5)
    report = gradcheck(SoftmaxXent([0, 2, 1]), r.uniform(-1, 1, size=(3, 4)), tolerance=1e-5, rng=r)
    assert report.passed, report.lines()


def test_statspool_gradcheck():
    r = make_rng(8)
    pool = StatsPool()
    x = r.uniform(-1, 1, size=(7, 3))
    probe = r.uniform(-1, 1, size=(2, 6))

    def closure(backward):
        out = pool.forward(x, [3, 4])
        loss = float(np.sum(out * probe))
        if not backward:
            pool._cache = None
            return loss, []
        return loss, [pool.backward(probe)]

    report = check_gradients(closure, [], [x], 1e-5)
    assert report.passed, report.lines()


def test_statspool_values():
    x = np.array([[1.0, 0.0], [3.0, 0.0], [0.0, 2.0], [0.0, 2.0], [0.0, 2.0]])
    out = StatsPool().forward(x, [2, 3])
    np.testing.assert_allclose(out[0], [2.0, 0.0, 1.0, 1e-4])
    np.testing.assert_allclose(out[1], [0.0, 2.0, 1e-4, 1e-4])
    with pytest.raises(DataError):
        StatsPool().forward(x, [1, 4])


def test_backward_at_most_once(rng):
    lin = Linear(2, 2, "l", "embedding", rng)
    lin.forward(np.ones((1, 2)))
    lin.backward(np.ones((1, 2)))
    with pytest.raises(RuntimeError):
        lin.backward(np.ones((1, 2)))


@pytest.mark.parametrize("make", [
    lambda r: Linear(3, 2, "l", "embedding", r),
    lambda r: GLU(3, 2, "g", "adapter", r),
    lambda r: LayerNorm(3, "n", "adapter"),
])
def test_gradient_accumulation(make):
    r = make_rng(3)
    layer = make(r)
    randomize(layer, r)
    x1, x2 = r.uniform(-1, 1, size=(2, 3)), r.uniform(-1, 1, size=(2, 3))
    dy1, dy2 = r.uniform(-1, 1, size=(2, layer.params[0].value.shape[-1])), None
    dy2 = r.uniform(-1, 1, size=dy1.shape)
    single = []
    for x, dy in ((x1, dy1), (x2, dy2)):
        for p in layer.params:
            p.zero_grad()
        layer.forward(x)
        layer.backward(dy)
        single.append([p.grad.copy() for p in layer.params])
    for p in layer.params:
        p.zero_grad()
    layer.forward(x1)
    layer.backward(dy1)
    layer.forward(x2)
    layer.backward(dy2)
    for p, g1, g2 in zip(layer.params, *single):
        np.testing.assert_allclose(p.grad, g1 + g2, rtol=0, atol=1e-12)


def test_param_group_is_immutable():
    p = Param("w", np.zeros(2), "adapter")
    with pytest.raises(AttributeError):
        p.group = "embedding"
    with pytest.raises(ValueError):
        Param("w", np.zeros(2), "decoder")


def test_gradcheck_flags_wrong_backward(rng):
    class Broken(Linear):
        def backward(self, dy):
            return 2 * super().backward(dy)

    layer = Broken(3, 2, "b", "embedding", rng)
    report = gradcheck(layer, rng.uniform(-1, 1, size=(2, 3)), tolerance=1e-5, rng=rng)
    assert not report.passed
    assert report.failures == ["input[0]"]
