import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import graph_grad_check, rel_err
from fedsto.autodiff import ContractError, Graph, ShapeError, forward_backward, run, spectral_norm

floats = st.floats(-3, 3, allow_nan=False, width=64)


def test_scalar_chain_rule():
    g = Graph()
    x = g.input("x", ())
    y = g.square(x) * 3.0 + x
    val, grads = forward_backward(g, {"x": np.array(2.0)}, root=y)
    assert val == pytest.approx(14.0)
    assert grads["x"] == pytest.approx(13.0)


def test_matmul_example_matches_finite_differences():
    rng = np.random.default_rng(0)
    g = Graph()
    a = g.input("a", (3, 4))
    b = g.input("b", (4, 2))
    root = g.sum(g.square(a @ b))
    inputs = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((4, 2))}
    for name in "ab":
        got, want = graph_grad_check(g, inputs, root, name, h=1e-3)
        assert rel_err(got, want) < 1e-3


@pytest.mark.parametrize("op", ["sigmoid", "atan", "leaky", "log", "div", "softmax_ce", "power", "minmax"])
def test_elementwise_gradients(op):
    rng = np.random.default_rng(1)
    g = Graph()
    x = g.input("x", (5,))
    if op == "sigmoid":
        y = g.sigmoid(x)
    elif op == "atan":
        y = g.atan(x)
    elif op == "leaky":
        y = g.leaky_relu(x, 0.1)
    elif op == "log":
        y = g.log(g.sigmoid(x))
    elif op == "div":
        y = g.const(np.arange(1.0, 6.0)) / (g.square(x) + 1.0)
    elif op == "softmax_ce":
        t = np.array([0.1, 0.2, 0.3, 0.4, 0.0])
        y = g.softmax_ce(x, g.const(t))
    elif op == "power":
        y = g.power(g.sigmoid(x), 2.5)
    else:
        y = g.maximum(x, g.const(np.zeros(5))) + g.minimum(x * 2.0, g.const(np.ones(5)))
    root = g.sum(y * g.const(rng.standard_normal(y.shape)))
    xv = rng.uniform(0.2, 1.5, 5) * rng.choice([-1, 1], 5)
    got, want = graph_grad_check(g, {"x": xv}, root, "x")
    assert rel_err(got, want) < 1e-3


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1), (1, 1)])
def test_conv2d_gradients(stride, pad):
    rng = np.random.default_rng(2)
    g = Graph()
    x = g.input("x", (2, 6, 6, 3))
    w = g.input("w", (4, 3, 3, 3))
    y = g.conv2d(x, w, stride, pad)
    root = g.sum(y * g.const(rng.standard_normal(y.shape)))
    inputs = {"x": rng.standard_normal((2, 6, 6, 3)), "w": rng.standard_normal((4, 3, 3, 3))}
    for name in ("x", "w"):
        got, want = graph_grad_check(g, inputs, root, name)
        assert rel_err(got, want) < 1e-3


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(3)
    xv, wv = rng.standard_normal((1, 5, 5, 2)), rng.standard_normal((3, 2, 3, 3))
    g = Graph()
    y = g.conv2d(g.input("x", xv.shape), g.input("w", wv.shape), 2, 1)
    got = run(g, {"x": xv, "w": wv}, root=y, backward=False, dtype=np.float64).value
    xp = np.pad(xv, ((0, 0), (1, 1), (1, 1), (0, 0)))
    want = np.zeros((1, 3, 3, 3))
    for i in range(3):
        for j in range(3):
            patch = xp[0, 2 * i:2 * i + 3, 2 * j:2 * j + 3, :]          # (kh, kw, c)
            want[0, i, j] = np.einsum("hwc,ochw->o", patch, wv)
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_shape_error_names_node():
    g = Graph()
    a = g.input("a", (2, 3))
    b = g.input("b", (2, 3))
    with pytest.raises(ShapeError) as info:
        g.matmul(a, b)
    assert "matmul" in str(info.value)


def test_bound_input_shape_checked():
    g = Graph()
    g.input("a", (2,))
    with pytest.raises(ShapeError, match="'a'"):
        run(g, {"a": np.zeros(3)}, backward=False)


def test_non_scalar_root_rejected():
    g = Graph()
    a = g.input("a", (2,))
    with pytest.raises(ContractError):
        run(g, {"a": np.ones(2)}, root=a * 2.0)


def test_unreachable_input_gets_zero_gradient():
    g = Graph()
    a = g.input("a", (2,))
    g.input("b", (3,))
    _, grads = forward_backward(g, {"a": np.ones(2), "b": np.ones(3)}, root=g.sum(a))
    np.testing.assert_array_equal(grads["b"], np.zeros(3))


def test_frozen_input_has_no_gradient():
    g = Graph()
    a = g.input("a", (2,), grad=False)
    b = g.input("b", (2,))
    _, grads = forward_backward(g, {"a": np.ones(2), "b": np.ones(2)}, root=g.sum(a * b))
    assert set(grads) == {"b"}


@given(hnp.arrays(np.float64, (3, 4), elements=floats), hnp.arrays(np.float64, (3, 4), elements=floats))
def test_gradient_of_linear_form_is_its_coefficient(c, x):
    g = Graph()
    xv = g.input("x", (3, 4))
    _, grads = forward_backward(g, {"x": x}, root=g.sum(xv * g.const(c)), dtype=np.float64)
    np.testing.assert_allclose(grads["x"], c)


@given(hnp.arrays(np.float64, (4, 3), elements=floats))
def test_spectral_norm_matches_svd(m):
    want = np.linalg.norm(m, 2)
    got = spectral_norm(m, iterations=500).sigma
    assert got == pytest.approx(want, rel=1e-4, abs=1e-6)


def test_spectral_norm_zero_and_identity():
    assert spectral_norm(np.zeros((3, 3))).sigma == 0.0
    sn = spectral_norm(np.eye(4))
    assert sn.sigma == pytest.approx(1.0)
    assert sn.u @ np.eye(4) @ sn.v == pytest.approx(1.0)


def test_spectral_norm_gradient():
    rng = np.random.default_rng(4)
    m = rng.standard_normal((4, 3))
    g = Graph()
    root = g.spectral_norm(g.input("m", (4, 3)), iterations=200)
    got, want = graph_grad_check(g, {"m": m}, root, "m")
    assert rel_err(got, want) < 1e-3


def test_spectral_norm_rejects_bad_input():
    with pytest.raises(ValueError):
        spectral_norm(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        spectral_norm(np.eye(2), iterations=0)


def test_values_are_float32_by_default():
    g = Graph()
    x = g.input("x", (2,))
    tr = run(g, {"x": np.array([1.0, 2.0])}, root=g.sum(g.square(x)))
    assert tr.value.dtype == np.float32
    assert tr.gradients["x"].dtype == np.float32
