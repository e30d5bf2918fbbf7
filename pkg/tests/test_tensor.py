import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from manar import tensor as T
from manar.tensor import Tensor


# -- matmul ----------------------------------------------------------------


def test_matmul_identity():
    out = T.matmul(Tensor(np.eye(2)), Tensor([[3.0, 4.0], [5.0, 6.0]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_zero():
    out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[0.0], [0.0]]))
    np.testing.assert_array_equal(out.data, [[0]])


def test_matmul_hand_computed():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_deterministic(rng):
    a = Tensor(rng.normal(size=(17, 9)).astype(np.float32))
    b = Tensor(rng.normal(size=(9, 5)).astype(np.float32))
    first = T.matmul(a, b).data
    for _ in range(5):
        assert np.array_equal(T.matmul(a, b).data, first)


def test_default_storage_is_32_bit_and_64_bit_mode():
    assert Tensor([1.0, 2.0]).dtype == np.float64  # explicit float input keeps its type
    assert Tensor([1, 2]).dtype == np.float32
    assert T.zeros((2,)).dtype == np.float32
    with T.float64_mode():
        assert T.zeros((2,)).dtype == np.float64
        assert Tensor([1, 2]).dtype == np.float64
    assert T.zeros((2,)).dtype == np.float32


# -- softmax ----------------------------------------------------------------


def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax_row(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], atol=1e-7)


def test_softmax_analytic():
    np.testing.assert_allclose(T.softmax_row(Tensor([[0.0, math.log(3.0)]])).data, [[0.25, 0.75]], atol=1e-7)


def test_softmax_large_logits_shift_invariant(f64):
    big = T.softmax_row(Tensor([[1000.0, 1001.0]])).data
    small = T.softmax_row(Tensor([[0.0, 1.0]])).data
    np.testing.assert_allclose(big, small, rtol=0, atol=1e-15)
    np.testing.assert_allclose(big, [[0.2689414213699951, 0.7310585786300049]], atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=8),
                  elements=st.floats(-50, 50)),
       st.floats(-100, 100))
def test_softmax_rows_stochastic_and_shift_invariant(x, c):
    p = T.softmax_row(Tensor(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(T.softmax_row(Tensor(x + c)).data, p, atol=1e-9)


# -- topk -------------------------------------------------------------------


def test_topk_ties_lower_index_first():
    idx, vals = T.topk([1, 9, 3, 9], 2)
    assert idx == [1, 3]
    assert vals == [9, 9]


def test_topk_singleton():
    assert T.topk([5], 1)[0] == [0]


def test_topk_k_too_large():
    with pytest.raises(ValueError):
        T.topk([1, 2], 3)


def test_topk_matches_sort_oracle(rng):
    for _ in range(1000):
        p = int(rng.integers(1, 20))
        k = int(rng.integers(0, p + 1))
        # coarse integer scores make ties common
        s = rng.integers(-3, 4, size=p).astype(float)
        oracle = sorted(range(p), key=lambda i: (-s[i], i))[:k]
        assert T.topk(s, k)[0] == oracle


# -- backward ----------------------------------------------------------------


def test_backward_sum_gives_ones(rng):
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    T.backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_half_square(rng):
    x = Tensor(rng.normal(size=(5,)), requires_grad=True)
    T.backward((x * x).sum() * 0.5)
    np.testing.assert_allclose(x.grad, x.data, rtol=1e-12)


def test_backward_composite_matches_finite_differences(f64, rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)

    def f(a_):
        return (T.softmax(a_ @ b, axis=-1) * T.exp(a_ @ b)).sum()

    T.backward(f(a))
    fd = T.finite_diff_grad(f, a, 1e-5).data
    assert np.abs(a.grad - fd).max() / np.abs(fd).max() < 1e-4


def test_backward_non_scalar_root_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        T.backward(x * 2.0)


def test_backward_twice_rejected(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    y = (x * x).sum()
    T.backward(y)
    with pytest.raises(RuntimeError):
        T.backward(y)


def test_backward_visits_shared_nodes_once(rng):
    # y = s + s with s = sum(x): the shared node must contribute exactly twice
    x = Tensor(rng.normal(size=4), requires_grad=True)
    s = x.sum()
    T.backward(s + s)
    np.testing.assert_array_equal(x.grad, 2 * np.ones(4))


def test_tape_sequence_is_topological(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    y = T.exp(x)
    z = y * x
    assert y._node.seq < z._node.seq


def test_no_grad_records_nothing(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert y._node is None and not y.requires_grad


# -- finite differences -------------------------------------------------------


def test_finite_diff_of_sum(f64, rng):
    x = Tensor(rng.normal(size=(2, 3)))
    np.testing.assert_allclose(T.finite_diff_grad(lambda t: t.sum(), x).data, np.ones((2, 3)), atol=1e-9)


def test_finite_diff_square_at_three(f64):
    g = T.finite_diff_grad(lambda t: (t * t).sum(), Tensor([3.0]), 1e-5).data
    assert abs(g[0] - 6.0) <= 1e-6


# -- per-op gradient property -------------------------------------------------

UNARY_OPS = {
    "exp": T.exp,
    "tanh_gelu": T.gelu,
    "softmax": lambda a: T.softmax(a, axis=-1),
    "log_softmax": lambda a: T.log_softmax(a, axis=-1),
    "transpose": T.transpose,
    "reshape": lambda a: a.reshape(-1),
    "neg": T.neg,
    "scale": lambda a: T.scale(a, 0.37),
    "sum_axis": lambda a: a.sum(axis=0),
    "mean_axis": lambda a: a.mean(axis=-1, keepdims=True),
    "slice": lambda a: a[..., :1],
    "sqrt_pos": lambda a: T.sqrt(a * a + 1.0),
    "log_pos": lambda a: T.log(a * a + 1.0),
    "reciprocal_pos": lambda a: T.reciprocal(a * a + 1.0),
    "layer_norm": lambda a: T.layer_norm(a, Tensor(np.linspace(0.5, 1.5, a.shape[-1])), Tensor(np.zeros(a.shape[-1]))),
}


def _check_grad(f, x, weights):
    x.grad = None
    T.backward((f(x) * Tensor(weights)).sum())
    fd = T.finite_diff_grad(lambda z: (f(z) * Tensor(weights)).sum(), x, 1e-5).data
    scale = max(np.abs(fd).max(), np.abs(x.grad).max(), 1e-8)
    assert np.abs(x.grad - fd).max() / scale < 1e-4


@pytest.mark.parametrize("name", sorted(UNARY_OPS))
@settings(max_examples=15, deadline=None)
@given(shape=st.tuples(st.integers(1, 8), st.integers(1, 8)), seed=st.integers(0, 2**31 - 1))
def test_unary_op_gradients(name, shape, seed):
    rng = np.random.default_rng(seed)
    with T.float64_mode():
        x = Tensor(rng.normal(size=shape), requires_grad=True)
        f = UNARY_OPS[name]
        _check_grad(f, x, rng.normal(size=f(x).shape))


@settings(max_examples=25, deadline=None)
@given(p=st.integers(1, 8), q=st.integers(1, 8), r=st.integers(1, 8), seed=st.integers(0, 2**31 - 1))
def test_binary_op_gradients(p, q, r, seed):
    rng = np.random.default_rng(seed)
    with T.float64_mode():
        a = Tensor(rng.normal(size=(p, q)), requires_grad=True)
        b = Tensor(rng.normal(size=(q, r)), requires_grad=True)
        c = Tensor(rng.normal(size=(p, q)), requires_grad=True)
        bias = Tensor(rng.normal(size=(q,)), requires_grad=True)
        w = rng.normal(size=(p, r))
        _check_grad(lambda z: z @ b, a, w)
        _check_grad(lambda z: a @ z, b, w)
        wq = rng.normal(size=(p, q))
        _check_grad(lambda z: z * c, a, wq)
        _check_grad(lambda z: a + z, bias, wq)  # broadcast add
        _check_grad(lambda z: a * z, bias, wq)  # broadcast mul
        _check_grad(lambda z: T.concat_rows(z, c), a, rng.normal(size=(2 * p, q)))
        idx = rng.integers(0, p, size=5)
        _check_grad(lambda z: T.gather_rows(z, idx), a, rng.normal(size=(5, q)))


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 8), d=st.integers(1, 4), before=st.integers(0, 4), after=st.integers(0, 4),
       seed=st.integers(0, 2**31 - 1))
def test_banded_ops_match_window_oracle_and_gradients(n, d, before, after, seed):
    rng = np.random.default_rng(seed)
    width = before + after + 1
    with T.float64_mode():
        q = Tensor(rng.normal(size=(2, n, d)), requires_grad=True)
        k = Tensor(rng.normal(size=(2, n, d)), requires_grad=True)
        p = Tensor(rng.normal(size=(2, n, width)), requires_grad=True)
        # direct loop oracle
        dots = np.zeros((2, n, width))
        mix = np.zeros((2, n, d))
        for i in range(n):
            for w in range(width):
                j = i + w - before
                if 0 <= j < n:
                    dots[:, i, w] = (q.data[:, i] * k.data[:, j]).sum(-1)
                    mix[:, i] += p.data[:, i, w, None] * k.data[:, j]
        np.testing.assert_allclose(T.band_dot(q, k, before, after).data, dots, atol=1e-12)
        np.testing.assert_allclose(T.band_mix(p, k, before, after).data, mix, atol=1e-12)
        win = T.sliding_window(k, before, after).data
        for w in range(width):
            np.testing.assert_allclose(win[:, :, w], np.stack(
                [k.data[:, i + w - before] if 0 <= i + w - before < n else np.zeros((2, d)) for i in range(n)], 1))
        _check_grad(lambda z: T.band_dot(z, k, before, after), q, rng.normal(size=(2, n, width)))
        _check_grad(lambda z: T.band_dot(q, z, before, after), k, rng.normal(size=(2, n, width)))
        _check_grad(lambda z: T.band_mix(z, k, before, after), p, rng.normal(size=(2, n, d)))
        _check_grad(lambda z: T.band_mix(p, z, before, after), k, rng.normal(size=(2, n, d)))
        _check_grad(lambda z: T.sliding_window(z, before, after), k, rng.normal(size=(2, n, width, d)))


def test_cross_entropy_value_and_gradient(f64, rng):
    logits = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    labels = np.array([0, 2, 1, 2])
    loss = T.cross_entropy(logits, labels)
    p = np.exp(logits.data) / np.exp(logits.data).sum(-1, keepdims=True)
    assert loss.item() == pytest.approx(-np.mean(np.log(p[np.arange(4), labels])), rel=1e-12)
    T.backward(loss)
    onehot = np.eye(3)[labels]
    np.testing.assert_allclose(logits.grad, (p - onehot) / 4, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-30, 30, width=32)))
def test_public_ops_stay_finite(x):
    t = Tensor(x)
    for out in (T.softmax_row(t), T.gelu(t), T.log_softmax(t), T.layer_norm(t, Tensor(np.ones(x.shape[1], np.float32)),
                                                                           Tensor(np.zeros(x.shape[1], np.float32)))):
        assert np.isfinite(out.data).all()
        assert out.data.size == int(np.prod(out.shape))


def test_grad_shape_matches_data(rng):
    x = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    T.backward(T.gelu(x @ Tensor(rng.normal(size=(2, 4)))).sum())
    assert x.grad.shape == x.shape
