import numpy as np
import pytest

from interkd import tensor as T
from interkd.tensor import ShapeError, Tensor

from oracles import central_difference, rel_error


def grad_check(fn, *arrays, seed=0, tol=1e-4, eps=1e-5):
    """Compare autodiff gradients of sum(R * fn(...)) with central differences."""
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    weights = np.random.default_rng(seed).normal(size=out.shape)
    (out * weights).sum().backward()
    for t in tensors:
        def f():
            with T.no_grad():
                return float((fn(*tensors).data * weights).sum())
        num = central_difference(f, t.data, eps)
        assert rel_error(t.grad, num) < tol, f"gradient mismatch for {fn}"


rng = np.random.default_rng(42)


def r(*shape):
    return rng.normal(size=shape)


GRAD_CASES = [
    ("add_broadcast", lambda a, b: a + b, (r(3, 4), r(4))),
    ("sub", lambda a, b: a - b, (r(2, 3), r(2, 1))),
    ("mul_broadcast", lambda a, b: a * b, (r(2, 3, 4), r(3, 1))),
    ("div", lambda a, b: a / b, (r(3, 2), r(3, 2) ** 2 + 0.5)),
    ("scale", lambda a: T.scale(a, -2.5), (r(4),)),
    ("exp", lambda a: a.exp(), (r(3, 3),)),
    ("log", lambda a: a.log(), (r(5) ** 2 + 0.3,)),
    ("sqrt", lambda a: T.sqrt(a), (r(5) ** 2 + 0.3,)),
    ("tanh", T.tanh, (r(4, 2),)),
    ("sigmoid", T.sigmoid, (3 * r(4, 2),)),
    ("relu", T.relu, (r(6) + 0.05,)),
    ("swish", T.swish, (r(3, 5),)),
    ("glu", lambda a: T.glu(a, axis=-1), (r(2, 3, 6),)),
    ("glu_axis0", lambda a: T.glu(a, axis=0), (r(4, 3),)),
    ("sum_axis", lambda a: a.sum(axis=1), (r(2, 3, 4),)),
    ("sum_keepdims", lambda a: a.sum(axis=(0, 2), keepdims=True), (r(2, 3, 4),)),
    ("mean", lambda a: a.mean(axis=-1), (r(3, 4),)),
    ("reshape", lambda a: a.reshape(6, 2), (r(3, 4),)),
    ("transpose", lambda a: a.transpose(2, 0, 1), (r(2, 3, 4),)),
    ("slice", lambda a: a[1:, ::2], (r(3, 5),)),
    ("fancy_index", lambda a: a[[0, 2, 0]], (r(3, 2),)),
    ("concat", lambda a, b: T.concat([a, b], axis=1), (r(2, 3), r(2, 2))),
    ("matmul_batched", lambda a, b: a @ b, (r(2, 3, 4), r(4, 5))),
    ("linear", lambda x, w, b: T.linear(x, w, b), (r(2, 3, 4), r(4, 5), r(5))),
    ("pointwise_conv", lambda x, w: T.pointwise_conv1d(x, w), (r(2, 3, 4), r(4, 2))),
    ("softmax", lambda a: T.softmax(a, axis=-1), (r(3, 4),)),
    ("softmax_axis0", lambda a: T.softmax(a, axis=0), (r(3, 4),)),
    ("log_softmax", T.log_softmax, (r(3, 4),)),
    ("logsumexp", lambda a: T.logsumexp(a, axis=1), (r(3, 4, 2),)),
    ("layer_norm", lambda x, g, b: T.layer_norm(x, g, b), (r(4, 8), r(8), r(8))),
    ("layer_norm_plain", lambda x: T.layer_norm(x), (r(2, 3, 5),)),
    ("depthwise_conv", lambda x, w, b: T.depthwise_conv1d(x, w, b), (r(2, 6, 3), r(3, 3), r(3))),
    ("attention", lambda q, k, v: T.attention(q, k, v), (r(2, 3, 4), r(2, 5, 4), r(2, 5, 4))),
    ("attention_causal", lambda q, k, v: T.attention(q, k, v, T.causal_mask(4)),
     (r(4, 3), r(4, 3), r(4, 3))),
    ("gather_last", lambda a: T.gather_last(a, np.array([[0, 2], [1, 1], [3, 0]])), (r(3, 4),)),
]


@pytest.mark.parametrize("name,fn,arrays", GRAD_CASES, ids=[c[0] for c in GRAD_CASES])
def test_gradients_match_finite_differences(name, fn, arrays):
    grad_check(fn, *arrays)


def test_embedding_gradient_accumulates_repeated_ids():
    w = Tensor(r(5, 3), requires_grad=True)
    ids = np.array([[1, 1], [4, 1]])
    T.embedding(w, ids).sum().backward()
    expected = np.zeros((5, 3))
    expected[1] = 3
    expected[4] = 1
    np.testing.assert_array_equal(w.grad, expected)


def test_dropout_uses_external_mask():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    mask = np.array([[True, False, True], [False, True, True]])
    y = T.dropout(x, mask, 0.5)
    np.testing.assert_array_equal(y.data, mask * 2.0)
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, mask * 2.0)
    assert T.dropout(x, None, 0.5) is x


def test_softmax_uniform_and_shift_invariant():
    np.testing.assert_allclose(T.softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3, rtol=0, atol=1e-15)
    x = r(4, 7)
    np.testing.assert_allclose(T.softmax(Tensor(x + 123.0)).data, T.softmax(Tensor(x)).data,
                               atol=1e-14)


def test_softmax_rows_sum_to_one_and_log_softmax_normalised():
    x = 30 * r(50, 9)
    np.testing.assert_allclose(T.softmax(Tensor(x)).data.sum(-1), 1.0, atol=1e-12)
    lsm = T.log_softmax(Tensor(x)).data
    np.testing.assert_allclose(T.logsumexp_np(lsm, axis=-1), 0.0, atol=1e-10)


def test_log_softmax_is_stable_for_large_inputs():
    out = T.log_softmax(Tensor(np.array([1000.0, 0.0, -1000.0]))).data
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(0.0, abs=1e-12)


def test_layer_norm_statistics():
    out = T.layer_norm(Tensor(r(4, 8))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, rtol=1e-4)


def test_backward_quadratic():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_constant_root_leaves_grads_zero():
    x = Tensor(np.ones(3), requires_grad=True)
    Tensor(np.array(5.0)).backward()
    np.testing.assert_array_equal(x.grad, np.zeros(3))


def test_repeated_backward_accumulates():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    y = (x * x).sum()
    y.backward()
    y.backward()
    np.testing.assert_array_equal(x.grad, [4.0, -8.0])


def test_backward_rejects_non_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError, match="scalar"):
        (x * 2.0).backward()


def test_shared_subexpression_gradient():
    # y = (a*b) + (a*b)^2 uses the product twice
    a = Tensor(np.array(1.5), requires_grad=True)
    b = Tensor(np.array(-0.5), requires_grad=True)
    p = a * b
    (p + p * p).backward()
    pv = 1.5 * -0.5
    assert a.grad == pytest.approx((1 + 2 * pv) * -0.5)
    assert b.grad == pytest.approx((1 + 2 * pv) * 1.5)


def test_mlp_gradient_matches_finite_differences():
    g = np.random.default_rng(3)
    ws = [g.normal(size=(4, 6)), g.normal(size=(6, 5)), g.normal(size=(5, 1))]
    x = g.normal(size=(7, 4))

    def mlp(w1, w2, w3):
        h = T.tanh(Tensor(x) @ w1)
        h = T.swish(h @ w2)
        return (h @ w3).sum()

    grad_check(mlp, *ws)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad and y._parents == ()
    assert T.is_grad_enabled()


@pytest.mark.parametrize("fn,msg", [
    (lambda: Tensor(np.ones((2, 3))) + Tensor(np.ones((4, 3))), r"add: .*\(2, 3\).*\(4, 3\)"),
    (lambda: Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3))), r"matmul: .*\(2, 3\) @ \(2, 3\)"),
    (lambda: Tensor(np.ones(6)).reshape(4, 2), r"reshape: .*\(6,\).*\(4, 2\)"),
    (lambda: T.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2)))), r"linear"),
    (lambda: T.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2)))], axis=1), r"concat"),
    (lambda: T.softmax(Tensor(np.ones((2, 3))), axis=2), r"softmax: axis 2"),
    (lambda: T.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(4))), r"layer_norm"),
    (lambda: T.depthwise_conv1d(Tensor(np.ones((1, 4, 3))), Tensor(np.ones((2, 3)))), r"depthwise"),
    (lambda: T.glu(Tensor(np.ones((2, 3)))), r"glu"),
    (lambda: T.embedding(Tensor(np.ones((3, 2))), [3]), r"embedding"),
    (lambda: T.attention(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))), Tensor(np.ones((2, 4)))),
     r"attention"),
])
def test_shape_errors_name_op_and_shapes(fn, msg):
    with pytest.raises(ShapeError, match=msg):
        fn()


def test_causal_attention_ignores_future_keys():
    q, k, v = r(4, 3), r(4, 3), r(4, 3)
    mask = T.causal_mask(4)
    base = T.attention(Tensor(q), Tensor(k), Tensor(v), mask).data
    k2, v2 = k.copy(), v.copy()
    k2[3] += 5.0
    v2[3] -= 5.0
    moved = T.attention(Tensor(q), Tensor(k2), Tensor(v2), mask).data
    np.testing.assert_array_equal(base[:3], moved[:3])
    assert not np.allclose(base[3], moved[3])


def test_depthwise_conv_matches_direct_convolution():
    x, w = r(1, 7, 2), r(3, 2)
    out = T.depthwise_conv1d(Tensor(x), Tensor(w)).data
    for c in range(2):
        expected = np.convolve(np.pad(x[0, :, c], 1), w[::-1, c], mode="valid")
        np.testing.assert_allclose(out[0, :, c], expected, atol=1e-14)


def test_grad_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    a.grad = np.array([3.0, 0.0])
    b.grad = np.array([4.0])
    assert T.grad_norm([a, b]) == pytest.approx(5.0)
