import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from stealthbfa import tensor as T
from stealthbfa.tensor import ContractError, DimensionError, Tensor

from conftest import central_difference, rel_error


def naive_conv(x, k, stride, pad):
    n, cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, oh, ow))
    for b in range(n):
        for o in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for c in range(cin):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += xp[b, c, i * stride + di, j * stride + dj] * k[o, c, di, dj]
                    out[b, o, i, j] = acc
    return out


def test_matmul_identity_and_hand_case():
    a = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal(T.matmul(a, b).data, [[3, 4], [5, 6]])
    np.testing.assert_array_equal(T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    T.backward(T.tsum(T.matmul(a, b)))
    f = lambda: float((a.data @ b.data).sum())
    assert rel_error(a.grad, central_difference(f, a.data)).max() < 1e-5
    assert rel_error(b.grad, central_difference(f, b.data)).max() < 1e-5


def test_conv2d_ones_and_delta_kernel():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 2, 2))), 1, 0)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))

    x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
    k = np.zeros((1, 1, 2, 2))
    k[0, 0, 0, 0] = 1.0
    out = T.conv2d(Tensor(x), Tensor(k), 1, 0)
    np.testing.assert_array_equal(out.data[0, 0], x[0, 0, :3, :3])


def test_conv2d_kernel_larger_than_input():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), 1, 0)


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1), (1, 2)])
def test_conv2d_matches_naive_loops_and_finite_differences(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = Tensor(rng.normal(size=(2, 3, 8, 8)), requires_grad=True)
    k = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
    out = T.conv2d(x, k, stride, pad)
    np.testing.assert_allclose(out.data, naive_conv(x.data, k.data, stride, pad), rtol=1e-12, atol=1e-12)

    weights = rng.normal(size=out.shape)
    T.backward(T.tsum(T.mul(out, weights)))
    f = lambda: float((naive_conv(x.data, k.data, stride, pad) * weights).sum())
    assert rel_error(k.grad, central_difference(f, k.data)).max() < 1e-5
    # input gradient on a subset of positions keeps the naive oracle affordable
    gx = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    for i in rng.choice(flat.size, 40, replace=False):
        orig = flat[i]
        flat[i] = orig + 1e-4
        hi = f()
        flat[i] = orig - 1e-4
        lo = f()
        flat[i] = orig
        gx.reshape(-1)[i] = (hi - lo) / 2e-4
        assert rel_error(x.grad.reshape(-1)[i], gx.reshape(-1)[i]) < 1e-5


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], atol=1e-15)
    p = T.softmax(Tensor([[1000.0, 0.0]])).data
    assert np.isfinite(p).all()
    assert p[0, 0] == pytest.approx(1.0) and p[0, 1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_jvp_matches_finite_differences():
    rng = np.random.default_rng(3)
    z = Tensor(rng.normal(size=(3, 5)) * 3, requires_grad=True)
    v = rng.normal(size=(3, 5))
    T.backward(T.tsum(T.mul(T.softmax(z), v)))

    def f():
        e = np.exp(z.data - z.data.max(axis=1, keepdims=True))
        return float(((e / e.sum(axis=1, keepdims=True)) * v).sum())

    assert rel_error(z.grad, central_difference(f, z.data)).max() < 1e-5


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (4, 6), elements=st.floats(-1e4, 1e4)))
def test_softmax_rows_sum_to_one(logits):
    p = T.softmax(Tensor(logits)).data
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_relu_values_and_mask():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    x = Tensor(-np.ones(5), requires_grad=True)
    T.backward(T.tsum(T.relu(x)))
    np.testing.assert_array_equal(x.grad, np.zeros(5))

    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(7, 3)), requires_grad=True)
    T.backward(T.tsum(T.relu(x)))
    np.testing.assert_array_equal(x.grad, (x.data > 0).astype(float))


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor(np.zeros(3), requires_grad=True)
    T.backward(T.tsum(T.relu(x)))
    np.testing.assert_array_equal(x.grad, np.zeros(3))


def test_backward_simple_rules():
    w = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    T.backward(T.tsum(w))
    np.testing.assert_array_equal(w.grad, np.ones(3))

    w.zero_grad()
    T.backward(T.tsum(T.mul(w, w)))
    np.testing.assert_array_equal(w.grad, 2 * w.data)


def test_backward_accumulates_shared_subexpressions_and_repeated_calls():
    w = Tensor(np.array([0.5, 4.0]), requires_grad=True)
    y = T.add(T.tsum(w), T.tsum(w))
    T.backward(y)
    np.testing.assert_array_equal(w.grad, [2.0, 2.0])
    T.backward(y)
    np.testing.assert_array_equal(w.grad, [4.0, 4.0])


def test_backward_requires_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(T.mul(w, 2.0))


def test_two_layer_mlp_cross_entropy_all_parameters_finite_difference():
    from stealthbfa.metrics import cross_entropy

    rng = np.random.default_rng(5)
    x = rng.normal(size=(6, 5))
    y = rng.integers(0, 4, size=6)
    params = [rng.normal(size=s) for s in [(5, 7), (7,), (7, 4), (4,)]]
    leaves = [Tensor(p, requires_grad=True) for p in params]

    def build(ps):
        h = T.relu(T.add(T.matmul(Tensor(x), ps[0]), ps[1]))
        return cross_entropy(T.add(T.matmul(h, ps[2]), ps[3]), y)

    T.backward(build(leaves))

    def f():
        with T.no_grad():
            return build([Tensor(p.data) for p in leaves]).item()

    for leaf in leaves:
        assert rel_error(leaf.grad, central_difference(f, leaf.data)).max() < 1e-4


def test_no_grad_records_nothing():
    w = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = T.tsum(T.mul(w, 3.0))
    assert not y.requires_grad and y.is_leaf


def test_avgpool2_gradient():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(2, 3, 6, 5)), requires_grad=True)
    v = rng.normal(size=(2, 3, 3, 2))
    T.backward(T.tsum(T.mul(T.avgpool2(x), v)))

    def f():
        with T.no_grad():
            return float((T.avgpool2(Tensor(x.data)).data * v).sum())

    assert rel_error(x.grad, central_difference(f, x.data), floor=1e-9).max() < 1e-5
