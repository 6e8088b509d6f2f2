import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crlstereo import tensor as T
from crlstereo.tensor import ConvSpec, DimensionError, Tensor, grad_check


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def conv_oracle(x, w, b, stride, pad):
    # direct nested-loop correlation, the textbook definition
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[ni, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[ni, oi, i, j] = (patch * w[oi]).sum() + b[oi]
    return out


@pytest.mark.parametrize("k,s", [(3, 1), (5, 1), (3, 2), (5, 2), (7, 2), (1, 1)])
def test_conv2d_matches_nested_loops(k, s):
    rng = np.random.default_rng(k * 10 + s)
    spec = ConvSpec.same(k, s, 3, 4)
    x = rng.standard_normal((2, 3, 9, 11))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), spec).data
    assert np.abs(got - conv_oracle(x, w, b, s, spec.padding)).max() < 1e-12


def test_transposed_conv_is_adjoint_of_conv():
    # <conv(x), y> == <x, conv_T(y)> with the same weights
    rng = np.random.default_rng(3)
    fwd = ConvSpec(4, 2, 1, 3, 5)
    x = rng.standard_normal((2, 3, 8, 10))
    w = rng.standard_normal((5, 3, 4, 4))
    y = rng.standard_normal((2, 5, 4, 5))
    cx = T.conv2d(Tensor(x), Tensor(w), None, fwd).data
    back = ConvSpec(4, 2, 1, 5, 3)
    ty = T.transposed_conv2d(Tensor(y), Tensor(w), None, back).data
    assert ty.shape == x.shape
    assert abs((cx * y).sum() - (x * ty).sum()) < 1e-10


def test_upconv_doubles_and_quadruples_size():
    x = Tensor(np.zeros((1, 2, 5, 7)))
    assert T.transposed_conv2d(x, Tensor(np.zeros((2, 3, 4, 4))), None, ConvSpec(4, 2, 1, 2, 3)).shape == (1, 3, 10, 14)
    assert T.transposed_conv2d(x, Tensor(np.zeros((2, 3, 8, 8))), None, ConvSpec(8, 4, 2, 2, 3)).shape == (1, 3, 20, 28)


def test_conv_rejects_channel_mismatch():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((3, 4, 3, 3))), None, ConvSpec.same(3, 1, 4, 3))


def test_leaky_relu_values():
    out = T.leaky_relu(Tensor(np.array([-2.0, 0.5, 3.0])), 0.1).data
    np.testing.assert_allclose(out, [-0.2, 0.5, 3.0])


def test_leaky_relu_gradcheck_tight():
    rng = np.random.default_rng(0)
    x = rng.choice([-1, 1], (1, 2, 3, 3)) * rng.uniform(0.2, 1, (1, 2, 3, 3))
    assert grad_check(lambda a: T.leaky_relu(a, 0.1), [t64(x)]) < 1e-6


def test_concat_and_add_gradcheck_tight():
    rng = np.random.default_rng(1)
    a, b = t64(rng.standard_normal((1, 2, 3, 3))), t64(rng.standard_normal((1, 1, 3, 3)))
    assert grad_check(lambda p, q: T.concat_channels([p, q]), [a, b]) < 1e-8
    c = t64(rng.standard_normal((1, 2, 3, 3)))
    assert grad_check(T.add, [a, c]) < 1e-8


def test_concat_rejects_spatial_mismatch():
    with pytest.raises(DimensionError):
        T.concat_channels([Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros((1, 1, 3, 4)))])
    with pytest.raises(DimensionError):
        T.add(Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros((1, 2, 3, 3))))


def test_composite_graph_gradcheck():
    rng = np.random.default_rng(2)
    spec = ConvSpec.same(3, 1, 2, 3)
    x = t64(rng.standard_normal((1, 2, 5, 5)))
    w = t64(rng.standard_normal((3, 2, 3, 3)) * 0.3)
    b = t64(rng.standard_normal(3) * 0.1 + 0.05)
    target = rng.standard_normal((1, 3, 5, 5)) + 3.0

    def f(x, w, b):
        y = T.leaky_relu(T.conv2d(x, w, b, spec), 0.1)
        return T.mean(T.abs_(T.sub(y, Tensor(target))))

    assert grad_check(f, [x, w, b]) < 1e-4


def test_shared_subexpression_accumulates():
    x = t64(np.full((1, 1, 2, 2), 3.0))
    y = T.mul(x, x)  # x used twice in one node
    T.backward(T.sum_(T.add(y, x)))
    np.testing.assert_allclose(x.grad, 2 * 3.0 + 1.0)


def test_unreachable_leaf_gets_zero_gradient():
    a, b = t64(np.ones((1, 1, 2, 2))), t64(np.ones((1, 1, 2, 2)))
    T.backward(T.sum_(T.scale(a, 2.0)), leaves=[a, b])
    np.testing.assert_array_equal(b.grad, 0.0)
    np.testing.assert_array_equal(a.grad, 2.0)


def test_no_grad_builds_no_graph():
    a = t64(np.ones((1, 1, 2, 2)))
    with T.no_grad():
        out = T.add(a, a)
    assert not out.requires_grad and out.is_leaf


def test_deep_chain_backward_is_iterative():
    x = t64(np.ones((1, 1, 1, 1)))
    y = x
    for _ in range(5000):
        y = T.shift(y, 0.0)
    T.backward(T.sum_(y))
    assert x.grad.item() == 1.0


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        T.backward(t64(np.ones((1, 1, 2, 2))))


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 3), st.integers(3, 8), st.integers(3, 8), st.sampled_from([1, 2]))
def test_conv_same_output_size(c, h, w, s):
    spec = ConvSpec.same(3, s, c, 2)
    out = T.conv2d(Tensor(np.zeros((1, c, h, w))), Tensor(np.zeros((2, c, 3, 3))), None, spec)
    assert out.shape == (1, 2, -(-h // s), -(-w // s))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000))
def test_conv_is_linear_in_input(seed):
    rng = np.random.default_rng(seed)
    spec = ConvSpec.same(3, 2, 2, 2)
    w = Tensor(rng.standard_normal((2, 2, 3, 3)))
    x1, x2 = rng.standard_normal((2, 1, 2, 6, 6))
    f = lambda x: T.conv2d(Tensor(x), w, None, spec).data
    np.testing.assert_allclose(f(x1 + 2 * x2), f(x1) + 2 * f(x2), atol=1e-10)
